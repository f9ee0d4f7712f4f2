//! Central finite differences, the independent oracle for the tape.

use rand::Rng;

use crate::autograd::Tape;
use crate::config::{FineTuneMode, HeadConfig, ModelConfig, ReinConfig, ReinVariant, ViTConfig};
use crate::error::{Error, Result};
use crate::head::IGNORE_LABEL;
use crate::model::SegModel;
use crate::params::Component;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

/// Finite-difference step for `f64` model checks.
pub const MODEL_STEP: f64 = 1e-5;

/// Estimates `∂f/∂x` coordinate by coordinate as
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if h <= T::zero() || !h.is_finite() {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both
/// vectors vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &[T]| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Toy Rein model: 2 layers of width 8, 4 patches, 4 tokens of rank 2,
/// query width 4, 3 classes.
pub fn toy_config(variant: ReinVariant) -> ModelConfig {
    let vit = ViTConfig {
        image_size: 8,
        patch_size: 4,
        depth: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2,
        tap_layers: vec![1, 2],
    };
    let rein = ReinConfig::for_backbone(&vit, 4, 2, 4, variant);
    ModelConfig {
        mode: FineTuneMode::Rein,
        head: HeadConfig {
            num_classes: 3,
            embed_dim: 4,
            num_queries: rein.m,
            use_query_head: true,
        },
        vit,
        rein,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorGradError {
    pub name: String,
    pub component: Component,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub variant: ReinVariant,
    pub rows: Vec<TensorGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the segmentation loss with central
/// differences for every adapter and head tensor of an `f64` toy model.
///
/// All trainable tensors, including the zero-initialized ones, are
/// redrawn from `U(-0.5, 0.5)` first so that no gradient path is dormant.
pub fn check_model_gradients(seed: u64, variant: ReinVariant) -> Result<GradCheckReport> {
    let cfg = toy_config(variant);
    let mut model = SegModel::<f64>::new(cfg.clone(), seed)?;
    let mut rng = stream_rng(seed, Stream::Check);
    for p in model.params_mut().iter_mut() {
        if p.component != Component::Backbone {
            for v in p.tensor.data_mut() {
                *v = rng.random_range(-0.5f32..0.5) as f64;
            }
        }
    }
    let s = cfg.vit.image_size;
    let image = Tensor::from_f64(
        [3, s, s],
        &(0..3 * s * s).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(),
    )?;
    let labels: Vec<u8> = (0..s * s)
        .map(|i| {
            if i % 13 == 5 {
                IGNORE_LABEL
            } else {
                rng.random_range(0..cfg.head.num_classes as u8)
            }
        })
        .collect();

    let loss_of = |m: &SegModel<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let loss = m.batch_loss(&mut tape, &bound, &[(&image, &labels)])?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = model.batch_loss(&mut tape, &bound, &[(&image, &labels)])?;
    tape.backward(loss)?;

    let mut rows = Vec::new();
    let mut probe = model.clone();
    for (i, p) in model.params().iter().enumerate() {
        if p.component == Component::Backbone {
            continue;
        }
        let id = model.params().id_of(&p.name).expect("own name");
        let analytic = tape.grad(bound.vars()[i]).ok_or_else(|| Error::Tensor {
            name: p.name.clone(),
            msg: "no gradient reached this tensor".into(),
        })?;
        let numeric = finite_difference_gradient(
            |x| {
                probe.params_mut().tensor_mut(id).data_mut().copy_from_slice(x.data());
                loss_of(&probe)
            },
            &p.tensor,
            MODEL_STEP,
        )?;
        probe.params_mut().tensor_mut(id).data_mut().copy_from_slice(p.tensor.data());
        rows.push(TensorGradError {
            name: p.name.clone(),
            component: p.component,
            rel_error: relative_error(analytic, numeric.data()),
        });
    }
    Ok(GradCheckReport { seed, variant, rows })
}
