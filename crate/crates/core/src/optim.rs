//! AdamW with decoupled, multiplicative weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Param, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn new(len: usize) -> Self {
        Moments {
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One AdamW update of `p` in place.
///
/// `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_update<T: Scalar>(p: &mut [T], g: &[T], state: &mut Moments<T>, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    if p.len() != g.len() || p.len() != state.m.len() || p.len() != state.v.len() {
        return Err(Error::shape("adamw", &[p.len()], &[g.len(), state.m.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let c1 = T::of(1.0 - cfg.beta1.powi(t));
    let c2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    for i in 0..p.len() {
        let gi = g[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * gi;
        state.v[i] = b2 * state.v[i] + (one - b2) * gi * gi;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Optimizer state for a [`ParamSet`]. Only tensors that were trainable at
/// some step own moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: Vec::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Names of tensors carrying optimizer state, in parameter order.
    pub fn state_names<'a>(&self, params: &'a ParamSet<T>) -> Vec<&'a str> {
        params
            .iter()
            .zip(&self.state)
            .filter(|(_, s)| s.is_some())
            .map(|(p, _)| p.name.as_str())
            .collect()
    }

    /// Updates every trainable tensor holding a gradient, using
    /// `lr(param)` as its learning rate. Gradients are checked for
    /// non-finite values before any tensor is touched.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: impl Fn(&Param<T>) -> f64) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Tensor {
                        name: p.name.clone(),
                        msg: format!("non-finite gradient {} at flat index {i}", g[i].as_f64()),
                    });
                }
            }
        }
        self.state.resize_with(params.len(), || None);
        for (p, slot) in params.iter_mut().zip(self.state.iter_mut()) {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let rate = lr(p);
            let st = slot.get_or_insert_with(|| Moments::new(g.len()));
            adamw_update(p.tensor.data_mut(), &g, st, rate, &self.cfg)?;
        }
        Ok(())
    }
}
