//! Plain-loop `f64` reference forward pass, written against parameter names
//! only and sharing no code with the tape implementation.

#![allow(dead_code)]

use reinlab::{ModelConfig, ParamSet, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        s => panic!("not a matrix: {s:?}"),
    };
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vecp(p: &ParamSet<f64>, name: &str) -> Vec<f64> {
    p.by_name(name).unwrap_or_else(|| panic!("missing {name}")).tensor.data().to_vec()
}

pub fn matp(p: &ParamSet<f64>, name: &str) -> Mat {
    mat(&p.by_name(name).unwrap_or_else(|| panic!("missing {name}")).tensor)
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

pub fn bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|row| row.iter().zip(b).map(|(u, v)| u + v).collect()).collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect()
}

pub fn softmax(a: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mu) * inv * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn cols(a: &Mat, from: usize, to: usize) -> Mat {
    a.iter().map(|row| row[from..to].to_vec()).collect()
}

pub fn hcat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().cloned()).collect())
        .collect()
}

pub fn max_abs(a: &Mat, b: &Tensor<f64>) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().cloned().collect();
    assert_eq!(flat.len(), b.numel());
    flat.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Patch rows, each ordered (channel, row, column), centred at 0.5.
pub fn patches(cfg: &ModelConfig, image: &Tensor<f64>) -> Mat {
    let (s, p) = (cfg.vit.image_size, cfg.vit.patch_size);
    let g = s / p;
    let px = |ch: usize, y: usize, x: usize| image.data()[ch * s * s + y * s + x];
    let mut out = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut row = Vec::new();
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        row.push(px(ch, gy * p + y, gx * p + x) - 0.5);
                    }
                }
            }
            out.push(row);
        }
    }
    out
}

pub fn encoder_layer(cfg: &ModelConfig, p: &ParamSet<f64>, i: usize, x: &Mat) -> Mat {
    let pre = format!("backbone.layer{i:02}");
    let c = cfg.vit.dim;
    let heads = cfg.vit.heads;
    let dh = c / heads;
    let h = layer_norm(x, &vecp(p, &format!("{pre}.norm1.weight")), &vecp(p, &format!("{pre}.norm1.bias")));
    let qkv = bias(&mm(&h, &matp(p, &format!("{pre}.attn.qkv.weight"))), &vecp(p, &format!("{pre}.attn.qkv.bias")));
    let mut outs = Vec::new();
    for hd in 0..heads {
        let q = cols(&qkv, hd * dh, (hd + 1) * dh);
        let k = cols(&qkv, c + hd * dh, c + (hd + 1) * dh);
        let v = cols(&qkv, 2 * c + hd * dh, 2 * c + (hd + 1) * dh);
        let scale = 1.0 / (dh as f64).sqrt();
        let a = softmax(&map(&mm(&q, &tr(&k)), |s| s * scale));
        outs.push(mm(&a, &v));
    }
    let refs: Vec<&Mat> = outs.iter().collect();
    let merged = hcat(&refs);
    let proj = bias(&mm(&merged, &matp(p, &format!("{pre}.attn.proj.weight"))), &vecp(p, &format!("{pre}.attn.proj.bias")));
    let x = add(x, &proj);
    let h = layer_norm(&x, &vecp(p, &format!("{pre}.norm2.weight")), &vecp(p, &format!("{pre}.norm2.bias")));
    let h = bias(&mm(&h, &matp(p, &format!("{pre}.mlp.fc1.weight"))), &vecp(p, &format!("{pre}.mlp.fc1.bias")));
    let h = map(&h, gelu);
    let h = bias(&mm(&h, &matp(p, &format!("{pre}.mlp.fc2.weight"))), &vecp(p, &format!("{pre}.mlp.fc2.bias")));
    add(&x, &h)
}

/// Per-layer adapter output: `Δf` and (when linked) `Q_i`.
pub struct AdapterStep {
    pub s: Mat,
    pub delta: Mat,
    pub q: Option<Mat>,
}

pub fn tokens(cfg: &ModelConfig, p: &ParamSet<f64>, i: usize) -> Mat {
    let pre = format!("adapter.layer{i:02}");
    if cfg.rein.variant.use_lora {
        mm(&matp(p, &format!("{pre}.A")), &matp(p, &format!("{pre}.B")))
    } else {
        matp(p, &format!("{pre}.T"))
    }
}

fn mlp_prefix(cfg: &ModelConfig, i: usize) -> String {
    if cfg.rein.variant.use_share {
        "adapter.shared".into()
    } else {
        format!("adapter.layer{i:02}")
    }
}

/// One refinement step written out line by line.
pub fn adapter_step(cfg: &ModelConfig, p: &ParamSet<f64>, i: usize, f: &Mat) -> AdapterStep {
    let c = cfg.vit.dim;
    let m = cfg.rein.m;
    let t = tokens(cfg, p, i);
    let pre = mlp_prefix(cfg, i);
    // S = softmax(f·Tᵀ/√c)
    let s = softmax(&map(&mm(f, &tr(&t)), |v| v / (c as f64).sqrt()));
    // Δf̄ = S[:, 2..m] · (T[2..m]·W_T + b_T), one-based
    let mut dbar = vec![vec![0.0; c]; f.len()];
    let w_t = matp(p, &format!("{pre}.W_T"));
    let b_t = vecp(p, &format!("{pre}.b_T"));
    for j in 1..m {
        let tj: Vec<f64> = (0..c)
            .map(|col| (0..c).map(|k| t[j][k] * w_t[k][col]).sum::<f64>() + b_t[col])
            .collect();
        for (row, drow) in dbar.iter_mut().enumerate() {
            for col in 0..c {
                drow[col] += s[row][j] * tj[col];
            }
        }
    }
    // Δf = (Δf̄ + f)·W_f + b_f
    let delta = bias(
        &mm(&add(&dbar, f), &matp(p, &format!("{pre}.W_f"))),
        &vecp(p, &format!("{pre}.b_f")),
    );
    let q = cfg.rein.variant.use_link.then(|| {
        bias(&mm(&t, &matp(p, &format!("{pre}.W_Q"))), &vecp(p, &format!("{pre}.b_Q")))
    });
    AdapterStep { s, delta, q }
}

pub fn aggregate(p: &ParamSet<f64>, qs: &[Mat]) -> Mat {
    let (m, cp) = (qs[0].len(), qs[0][0].len());
    let mut cat = vec![vec![0.0; 3 * cp]; m];
    for r in 0..m {
        for k in 0..cp {
            cat[r][k] = qs.iter().map(|q| q[r][k]).fold(f64::NEG_INFINITY, f64::max);
            cat[r][cp + k] = qs.iter().map(|q| q[r][k]).sum::<f64>() / qs.len() as f64;
            cat[r][2 * cp + k] = qs.last().unwrap()[r][k];
        }
    }
    bias(&mm(&cat, &matp(p, "adapter.W_Q_cat")), &vecp(p, "adapter.b_Q_cat"))
}

pub struct Reference {
    pub taps: Vec<Mat>,
    pub out: Mat,
    pub query: Option<Mat>,
    pub logits: Mat,
}

/// Bilinear half-pixel upsampling of a `K × g²` map to `K × s²`, sampling
/// each output pixel directly.
pub fn upsample(patch: &Mat, g: usize, s: usize) -> Mat {
    let src = |o: usize| ((o as f64 + 0.5) * g as f64 / s as f64 - 0.5).clamp(0.0, (g - 1) as f64);
    patch
        .iter()
        .map(|row| {
            let at = |y: usize, x: usize| row[y * g + x];
            let mut out = Vec::with_capacity(s * s);
            for oy in 0..s {
                for ox in 0..s {
                    let (sy, sx) = (src(oy), src(ox));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                    let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
                    let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                    let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
            out
        })
        .collect()
}

pub fn forward(cfg: &ModelConfig, p: &ParamSet<f64>, image: &Tensor<f64>) -> Reference {
    let with_adapter = cfg.uses_adapter();
    let x = bias(&mm(&patches(cfg, image), &matp(p, "backbone.patch_embed.weight")), &vecp(p, "backbone.patch_embed.bias"));
    let mut f = add(&x, &matp(p, "backbone.pos_embed"));
    let mut taps = Vec::new();
    let mut qs = Vec::new();
    for i in 1..=cfg.vit.depth {
        f = encoder_layer(cfg, p, i, &f);
        if with_adapter {
            let step = adapter_step(cfg, p, i, &f);
            f = add(&f, &step.delta);
            qs.extend(step.q);
        }
        if cfg.vit.tap_layers.contains(&i) {
            taps.push(f.clone());
        }
    }
    let query = (with_adapter && cfg.rein.variant.use_link).then(|| aggregate(p, &qs));

    let refs: Vec<&Mat> = taps.iter().collect();
    let pix = bias(&mm(&hcat(&refs), &matp(p, "head.pixel.weight")), &vecp(p, "head.pixel.bias"));
    let g = cfg.vit.grid();
    let patch_logits = if cfg.head.use_query_head {
        let mut queries = matp(p, "head.query.embed");
        if let (Some(q), true) = (&query, cfg.links_queries()) {
            queries = add(&queries, &mm(q, &matp(p, "head.query.link")));
        }
        let emb = bias(&mm(&queries, &matp(p, "head.query.proj.weight")), &vecp(p, "head.query.proj.bias"));
        let mask = mm(&emb, &tr(&pix));
        let class = bias(&mm(&queries, &matp(p, "head.class.weight")), &vecp(p, "head.class.bias"));
        let k = class[0].len();
        let n = pix.len();
        let mut out = vec![vec![0.0; n]; k];
        for (qi, crow) in class.iter().enumerate() {
            for (kk, orow) in out.iter_mut().enumerate() {
                for (px, o) in orow.iter_mut().enumerate() {
                    *o += crow[kk] / (1.0 + (-mask[qi][px]).exp());
                }
            }
        }
        out
    } else {
        tr(&bias(&mm(&pix, &matp(p, "head.pixel_class.weight")), &vecp(p, "head.pixel_class.bias")))
    };
    Reference {
        logits: upsample(&patch_logits, g, cfg.vit.image_size),
        out: f,
        taps,
        query,
    }
}
