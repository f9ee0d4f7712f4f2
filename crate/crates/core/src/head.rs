//! Lightweight query-mask segmentation head, loss and mIoU.
//!
//! Pixel embeddings are an affine map of the concatenated tap features.
//! Each query yields a mask over patches and a class score vector; the
//! per-patch class logits are
//!
//! ```text
//! logits[k, p] = Σ_q sigmoid(mask[q, p]) · class[q, k]
//! ```
//!
//! then bilinearly upsampled to label resolution. The head always owns a
//! learned query embedding. When the adapter links its tokens to the head,
//! the aggregated adapter query enters through a zero-initialized
//! projection added to that embedding, so an untrained adapter leaves the
//! head's output unchanged.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamId, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug)]
struct QueryIds {
    embed: ParamId,
    link: Option<ParamId>,
    proj_w: ParamId,
    proj_b: ParamId,
    class_w: ParamId,
    class_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecodeHead {
    cfg: HeadConfig,
    pixel_w: ParamId,
    pixel_b: ParamId,
    queries: Option<QueryIds>,
    pixel_class: Option<(ParamId, ParamId)>,
}

/// Tape nodes of one prediction.
#[derive(Clone, Copy, Debug)]
pub struct SegPrediction {
    /// `[queries × K]`, absent for the per-pixel head.
    pub class_logits: Option<Var>,
    /// `[queries × n]`, absent for the per-pixel head.
    pub mask_logits: Option<Var>,
    /// `[K × n]` before upsampling.
    pub patch_logits: Var,
    /// `[K × H·W]`.
    pub logits: Var,
}

/// Geometry the head needs from the backbone.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs {
    pub tap_count: usize,
    pub width: usize,
    pub query_dim: usize,
    pub linked: bool,
}

impl DecodeHead {
    pub fn new<T: Scalar>(
        cfg: &HeadConfig,
        inputs: HeadInputs,
        params: &mut ParamSet<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let head = Component::Head;
        let fused = inputs.tap_count * inputs.width;
        let (d, k, cp) = (cfg.embed_dim, cfg.num_classes, inputs.query_dim);
        let pixel_w = params.insert("head.pixel.weight", head, rng::uniform(&[fused, d], rng::fan_in_bound(fused), rng));
        let pixel_b = params.insert("head.pixel.bias", head, Tensor::zeros([d]));
        let (queries, pixel_class) = if cfg.use_query_head {
            let embed = params.insert(
                "head.query.embed",
                head,
                rng::uniform(&[cfg.num_queries, cp], 1.0, rng),
            );
            let proj_w = params.insert("head.query.proj.weight", head, rng::uniform(&[cp, d], rng::fan_in_bound(cp), rng));
            let proj_b = params.insert("head.query.proj.bias", head, Tensor::zeros([d]));
            let class_w = params.insert("head.class.weight", head, rng::uniform(&[cp, k], rng::fan_in_bound(cp), rng));
            let class_b = params.insert("head.class.bias", head, Tensor::zeros([k]));
            let link = inputs
                .linked
                .then(|| params.insert("head.query.link", head, Tensor::zeros([cp, cp])));
            (
                Some(QueryIds {
                    embed,
                    link,
                    proj_w,
                    proj_b,
                    class_w,
                    class_b,
                }),
                None,
            )
        } else {
            let w = params.insert("head.pixel_class.weight", head, rng::uniform(&[d, k], rng::fan_in_bound(d), rng));
            let b = params.insert("head.pixel_class.bias", head, Tensor::zeros([k]));
            (None, Some((w, b)))
        };
        Ok(DecodeHead {
            cfg: cfg.clone(),
            pixel_w,
            pixel_b,
            queries,
            pixel_class,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// Decodes tap features. `query` is the adapter's aggregated query and
    /// is required exactly when the head was built linked.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        taps: &[Var],
        query: Option<Var>,
        upsample: Var,
    ) -> Result<SegPrediction> {
        let fused = if taps.len() == 1 { taps[0] } else { tape.concat_cols(taps)? };
        let pix = tape.matmul(fused, bound.get(self.pixel_w))?;
        let pix = tape.add_bias(pix, bound.get(self.pixel_b))?;

        let (class_logits, mask_logits, patch_logits) = match (self.queries, self.pixel_class) {
            (Some(q), _) => {
                let mut queries = bound.get(q.embed);
                match (q.link, query) {
                    (Some(link), Some(adapter_q)) => {
                        let injected = tape.matmul(adapter_q, bound.get(link))?;
                        queries = tape.add(queries, injected)?;
                    }
                    (Some(_), None) => {
                        return Err(Error::Contract("linked head called without the adapter query".into()))
                    }
                    (None, Some(_)) => {
                        return Err(Error::Contract("adapter query passed to an unlinked head".into()))
                    }
                    (None, None) => {}
                }
                let emb = tape.matmul(queries, bound.get(q.proj_w))?;
                let emb = tape.add_bias(emb, bound.get(q.proj_b))?;
                let pix_t = tape.transpose(pix)?;
                let mask = tape.matmul(emb, pix_t)?;
                let class = tape.matmul(queries, bound.get(q.class_w))?;
                let class = tape.add_bias(class, bound.get(q.class_b))?;
                let weights = tape.sigmoid(mask)?;
                let class_t = tape.transpose(class)?;
                let logits = tape.matmul(class_t, weights)?;
                (Some(class), Some(mask), logits)
            }
            (None, Some((w, b))) => {
                let l = tape.matmul(pix, bound.get(w))?;
                let l = tape.add_bias(l, bound.get(b))?;
                (None, None, tape.transpose(l)?)
            }
            (None, None) => unreachable!("head has either queries or a pixel classifier"),
        };
        let logits = tape.matmul(patch_logits, upsample)?;
        Ok(SegPrediction {
            class_logits,
            mask_logits,
            patch_logits,
            logits,
        })
    }
}

/// Bilinear interpolation weights mapping a `grid × grid` patch map to an
/// `size × size` image with half-pixel centres, as an `[grid² × size²]`
/// matrix so that `logits[K × grid²] · U` upsamples.
pub fn upsample_matrix<T: Scalar>(grid: usize, size: usize) -> Tensor<T> {
    let axis: Vec<[(usize, f64); 2]> = (0..size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(grid - 1);
            let w = src - lo as f64;
            [(lo, 1.0 - w), (hi, w)]
        })
        .collect();
    let mut u = vec![0.0f64; grid * grid * size * size];
    for y in 0..size {
        for x in 0..size {
            let col = y * size + x;
            for &(gy, wy) in &axis[y] {
                for &(gx, wx) in &axis[x] {
                    u[(gy * grid + gx) * size * size + col] += wy * wx;
                }
            }
        }
    }
    Tensor::from_f64([grid * grid, size * size], &u).expect("shape matches")
}

/// Mean per-pixel cross-entropy of `[K × P]` logits, skipping
/// [`IGNORE_LABEL`] pixels.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let rows = tape.transpose(logits)?;
    tape.cross_entropy(rows, labels, IGNORE_LABEL)
}

/// Per-pixel argmax over classes of `[K × P]` logits; ties go to the lower
/// class id.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (k, p) = logits.dims2()?;
    let data = logits.data();
    Ok((0..p)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if data[c * p + px] > data[best * p + px] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Integer confusion counts, `[gt][pred]`. Accumulation order does not
/// affect the result.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.k || p as usize >= self.k {
                return Err(Error::Contract(format!(
                    "label pair ({g}, {p}) out of range for {} classes",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }

    pub fn report(&self) -> MiouReport {
        let k = self.k;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let inter = self.counts[c * k + c];
                let gt_total: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred_total: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
                let union = gt_total + pred_total - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, mean }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// IoU per class and their mean, over classes that occur in either map.
pub fn miou(pred: &[u8], gt: &[u8], k: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(k);
    cm.add(pred, gt)?;
    Ok(cm.report())
}
