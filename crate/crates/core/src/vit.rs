//! Plain pre-norm vision transformer with a per-layer refinement hook.
//!
//! The forward recurrence is
//!
//! ```text
//! f_1     = L_1(embed(x))
//! f_{i+1} = L_{i+1}(f_i + Δf_i)
//! f_out   = f_N + Δf_N
//! ```
//!
//! where `Δf_i` comes from an optional [`RefineHook`] and is zero without
//! one. There is no class token and no final norm.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamId, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-6;

/// Produces the feature delta `Δf_i` for a layer output `f_i`.
pub trait RefineHook<T: Scalar> {
    /// `layer` is 1-based. The returned node must have the shape of
    /// `features`.
    fn refine(&mut self, tape: &mut Tape<T>, layer: usize, features: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1_w: ParamId,
    norm1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    norm2_w: ParamId,
    norm2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct ViTBackbone {
    cfg: ViTConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// Refined features `f_i + Δf_i` at each tap layer, in order.
    pub taps: Vec<Var>,
    /// `f_N + Δf_N`.
    pub out: Var,
}

impl ViTBackbone {
    /// Registers backbone parameters in `params` (names `backbone.*`).
    pub fn new<T: Scalar>(cfg: &ViTConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let h = cfg.hidden();
        let pf = cfg.patch_features();
        let linear = |params: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut _| {
            let w = params.insert(
                format!("{name}.weight"),
                Component::Backbone,
                rng::uniform(&[fan_in, fan_out], rng::fan_in_bound(fan_in), rng),
            );
            let b = params.insert(format!("{name}.bias"), Component::Backbone, Tensor::zeros([fan_out]));
            (w, b)
        };
        let (patch_w, patch_b) = linear(params, "backbone.patch_embed", pf, c, rng);
        let pos = params.insert(
            "backbone.pos_embed",
            Component::Backbone,
            rng::trunc_normal(&[cfg.tokens(), c], 0.02, rng),
        );
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 1..=cfg.depth {
            let p = format!("backbone.layer{i:02}");
            let norm = |params: &mut ParamSet<T>, name: &str| {
                (
                    params.insert(format!("{p}.{name}.weight"), Component::Backbone, Tensor::ones([c])),
                    params.insert(format!("{p}.{name}.bias"), Component::Backbone, Tensor::zeros([c])),
                )
            };
            let (norm1_w, norm1_b) = norm(params, "norm1");
            let (qkv_w, qkv_b) = linear(params, &format!("{p}.attn.qkv"), c, 3 * c, rng);
            let (proj_w, proj_b) = linear(params, &format!("{p}.attn.proj"), c, c, rng);
            let (norm2_w, norm2_b) = norm(params, "norm2");
            let (fc1_w, fc1_b) = linear(params, &format!("{p}.mlp.fc1"), c, h, rng);
            let (fc2_w, fc2_b) = linear(params, &format!("{p}.mlp.fc2"), h, c, rng);
            layers.push(EncoderLayer {
                norm1_w,
                norm1_b,
                qkv_w,
                qkv_b,
                proj_w,
                proj_b,
                norm2_w,
                norm2_b,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        Ok(ViTBackbone {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            pos,
            layers,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Rearranges a `3×H×W` image into `n` rows of flattened patches,
    /// each ordered (channel, row, column), centred by subtracting 0.5.
    pub fn patchify<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape("patch_embed", image.shape(), &[3, s, s]));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        let px = image.data();
        let half = T::of(0.5);
        let mut out = Vec::with_capacity(self.cfg.tokens() * self.cfg.patch_features());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..3 {
                    for y in 0..p {
                        let row = ch * s * s + (gy * p + y) * s + gx * p;
                        out.extend(px[row..row + p].iter().map(|&v| v - half));
                    }
                }
            }
        }
        Tensor::new([self.cfg.tokens(), self.cfg.patch_features()], out)
    }

    /// `embed(x)`: one `c`-vector per patch plus the positional embedding.
    pub fn patch_embed<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, image: &Tensor<T>) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let proj = tape.matmul(patches, bound.get(self.patch_w))?;
        let proj = tape.add_bias(proj, bound.get(self.patch_b))?;
        tape.add(proj, bound.get(self.pos))
    }

    /// Encoder layer `L_i` (1-based).
    pub fn layer<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, i: usize, x: Var) -> Result<Var> {
        let l = &self.layers[i - 1];
        let c = self.cfg.dim;
        let heads = self.cfg.heads;
        let dh = c / heads;

        let h = tape.layer_norm(x, bound.get(l.norm1_w), bound.get(l.norm1_b), LN_EPS)?;
        let qkv = tape.matmul(h, bound.get(l.qkv_w))?;
        let qkv = tape.add_bias(qkv, bound.get(l.qkv_b))?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
            let k = tape.slice_cols(qkv, c + hd * dh, c + (hd + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * c + hd * dh, 2 * c + (hd + 1) * dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax_rows(scores)?;
            outs.push(tape.matmul(att, v)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let proj = tape.matmul(merged, bound.get(l.proj_w))?;
        let proj = tape.add_bias(proj, bound.get(l.proj_b))?;
        let x = tape.add(x, proj)?;

        let h = tape.layer_norm(x, bound.get(l.norm2_w), bound.get(l.norm2_b), LN_EPS)?;
        let h = tape.matmul(h, bound.get(l.fc1_w))?;
        let h = tape.add_bias(h, bound.get(l.fc1_b))?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, bound.get(l.fc2_w))?;
        let h = tape.add_bias(h, bound.get(l.fc2_b))?;
        tape.add(x, h)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: &Tensor<T>,
        mut hook: Option<&mut dyn RefineHook<T>>,
    ) -> Result<BackboneOutput> {
        let mut f = self.patch_embed(tape, bound, image)?;
        let mut taps = Vec::with_capacity(self.cfg.tap_layers.len());
        for i in 1..=self.cfg.depth {
            f = self.layer(tape, bound, i, f)?;
            if let Some(hook) = hook.as_deref_mut() {
                let delta = hook.refine(tape, i, f)?;
                if tape.shape(delta) != tape.shape(f) {
                    return Err(Error::Contract(format!(
                        "refinement hook returned {:?} for layer {i} features of shape {:?}",
                        tape.shape(delta),
                        tape.shape(f)
                    )));
                }
                f = tape.add(f, delta)?;
            }
            if self.cfg.tap_layers.contains(&i) {
                taps.push(f);
            }
        }
        Ok(BackboneOutput { taps, out: f })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_tap_layers;

    fn cfg(image: usize, patch: usize) -> ViTConfig {
        ViTConfig {
            image_size: image,
            patch_size: patch,
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2,
            tap_layers: default_tap_layers(2),
        }
    }

    fn build(c: &ViTConfig) -> (ViTBackbone, ParamSet<f32>) {
        let mut params = ParamSet::new();
        let mut r = rng::stream_rng(0, rng::Stream::Backbone);
        let vit = ViTBackbone::new(c, &mut params, &mut r).unwrap();
        (vit, params)
    }

    #[test]
    fn patch_counts() {
        for (image, patch, n) in [(32, 8, 16), (64, 8, 64)] {
            let c = cfg(image, patch);
            let (vit, params) = build(&c);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let img = Tensor::zeros([3, image, image]);
            let f = vit.patch_embed(&mut tape, &bound, &img).unwrap();
            assert_eq!(tape.shape(f), &[n, 8]);
        }
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let c = cfg(32, 8);
        let (vit, params) = build(&c);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let img = Tensor::zeros([3, 16, 16]);
        assert!(matches!(
            vit.patch_embed(&mut tape, &bound, &img),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_everything_embeds_to_zero() {
        let c = cfg(32, 8);
        let (vit, mut params) = build(&c);
        for p in params.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let img = Tensor::zeros([3, 32, 32]);
        let f = vit.patch_embed(&mut tape, &bound, &img).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    struct Wrong;
    impl RefineHook<f32> for Wrong {
        fn refine(&mut self, tape: &mut Tape<f32>, _: usize, _: Var) -> Result<Var> {
            Ok(tape.constant(Tensor::zeros([1, 1])))
        }
    }

    #[test]
    fn hook_shape_is_checked() {
        let c = cfg(16, 8);
        let (vit, params) = build(&c);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let img = Tensor::zeros([3, 16, 16]);
        let r = vit.forward(&mut tape, &bound, &img, Some(&mut Wrong));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
