//! Token-based feature refinement between backbone layers.
//!
//! Each layer `i` owns a token sequence `T_i` (`m × c`), optionally
//! factorized as `A_i · B_i` with rank `r`. Given layer features `f_i`
//! (`n × c`):
//!
//! ```text
//! S_i  = softmax(f_i · T_iᵀ / √c)                      n × m
//! Δf̄_i = S_i[:, 1..] · (T_i[1..] · W_T + b_T)          n × c   (first token dropped)
//! Δf_i = (Δf̄_i + f_i) · W_f + b_f                      n × c
//! Q_i  = T_i · W_Q + b_Q                               m × c′  (linked variants)
//! Q    = [max_i Q_i, mean_i Q_i, Q_N] · W_Qcat + b_Qcat
//! ```
//!
//! `W_f` and all biases start at zero, so a fresh adapter returns
//! `Δf_i = 0` and leaves the backbone untouched.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::ReinConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamId, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::vit::RefineHook;

#[derive(Clone, Copy, Debug)]
enum TokenIds {
    Full(ParamId),
    LowRank { a: ParamId, b: ParamId },
}

#[derive(Clone, Copy, Debug)]
struct MlpIds {
    w_t: ParamId,
    b_t: ParamId,
    w_f: ParamId,
    b_f: ParamId,
    query: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct ReinAdapter {
    cfg: ReinConfig,
    tokens: Vec<TokenIds>,
    /// One entry when shared, otherwise one per layer.
    mlps: Vec<MlpIds>,
    concat: Option<(ParamId, ParamId)>,
}

/// Materialized tokens and folded token MLP outputs, valid until the
/// adapter parameters next change.
#[derive(Clone, Debug)]
pub struct TokenCache<T> {
    tokens: Vec<Tensor<T>>,
    folded: Vec<Tensor<T>>,
    query: Option<Tensor<T>>,
}

impl<T: Scalar> TokenCache<T> {
    pub fn tokens(&self, layer: usize) -> &Tensor<T> {
        &self.tokens[layer - 1]
    }

    /// `T_i · W_T + b_T` over all `m` rows.
    pub fn folded(&self, layer: usize) -> &Tensor<T> {
        &self.folded[layer - 1]
    }

    pub fn query(&self) -> Option<&Tensor<T>> {
        self.query.as_ref()
    }
}

/// Per-forward token state: everything that depends on parameters only,
/// computed once and reused for every image in a batch.
#[derive(Clone, Debug)]
pub struct PreparedTokens {
    tokens: Vec<Var>,
    /// `T_i[1..] · W_T + b_T` for each layer.
    token_mlp: Vec<Var>,
    layer_queries: Vec<Var>,
    query: Option<Var>,
}

impl PreparedTokens {
    pub fn tokens(&self, layer: usize) -> Var {
        self.tokens[layer - 1]
    }

    pub fn layer_queries(&self) -> &[Var] {
        &self.layer_queries
    }

    /// The aggregated query `Q`, when linking is on.
    pub fn query(&self) -> Option<Var> {
        self.query
    }
}

impl ReinAdapter {
    /// Registers adapter parameters (`adapter.*`) with the initialization
    /// split: `W_f` and every bias zero, all other tensors uniform in
    /// `±√(1/fan_in)`. For the token factors the fan-in is the contraction
    /// width `r`; for full tokens it is `c`.
    pub fn new<T: Scalar>(cfg: &ReinConfig, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (m, r, c, cp, n) = (cfg.m, cfg.r, cfg.c, cfg.c_prime, cfg.depth);
        let v = cfg.variant;
        let adapter = Component::Adapter;

        let mut tokens = Vec::with_capacity(n);
        for i in 1..=n {
            let p = format!("adapter.layer{i:02}");
            tokens.push(if v.use_lora {
                let a = params.insert(format!("{p}.A"), adapter, rng::uniform(&[m, r], rng::fan_in_bound(r), rng));
                let b = params.insert(format!("{p}.B"), adapter, rng::uniform(&[r, c], rng::fan_in_bound(r), rng));
                TokenIds::LowRank { a, b }
            } else {
                TokenIds::Full(params.insert(
                    format!("{p}.T"),
                    adapter,
                    rng::uniform(&[m, c], rng::fan_in_bound(c), rng),
                ))
            });
        }

        let groups: Vec<String> = if v.use_share {
            vec!["adapter.shared".into()]
        } else {
            (1..=n).map(|i| format!("adapter.layer{i:02}")).collect()
        };
        let mut mlps = Vec::with_capacity(groups.len());
        for p in &groups {
            let w_t = params.insert(format!("{p}.W_T"), adapter, rng::uniform(&[c, c], rng::fan_in_bound(c), rng));
            let b_t = params.insert(format!("{p}.b_T"), adapter, Tensor::zeros([c]));
            let w_f = params.insert(format!("{p}.W_f"), adapter, Tensor::zeros([c, c]));
            let b_f = params.insert(format!("{p}.b_f"), adapter, Tensor::zeros([c]));
            let query = v.use_link.then(|| {
                (
                    params.insert(format!("{p}.W_Q"), adapter, rng::uniform(&[c, cp], rng::fan_in_bound(c), rng)),
                    params.insert(format!("{p}.b_Q"), adapter, Tensor::zeros([cp])),
                )
            });
            mlps.push(MlpIds {
                w_t,
                b_t,
                w_f,
                b_f,
                query,
            });
        }

        let concat = v.use_link.then(|| {
            (
                params.insert(
                    "adapter.W_Q_cat",
                    adapter,
                    rng::uniform(&[3 * cp, cp], rng::fan_in_bound(3 * cp), rng),
                ),
                params.insert("adapter.b_Q_cat", adapter, Tensor::zeros([cp])),
            )
        });

        Ok(ReinAdapter {
            cfg: cfg.clone(),
            tokens,
            mlps,
            concat,
        })
    }

    pub fn config(&self) -> &ReinConfig {
        &self.cfg
    }

    fn mlp(&self, layer: usize) -> &MlpIds {
        if self.cfg.variant.use_share {
            &self.mlps[0]
        } else {
            &self.mlps[layer - 1]
        }
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.cfg.depth {
            return Err(Error::Contract(format!(
                "layer {layer} outside 1..={}",
                self.cfg.depth
            )));
        }
        Ok(())
    }

    /// Parameter ids of `W_T`, `W_f`, `W_Q` for a layer (the same ids for
    /// every layer when shared).
    pub fn mlp_weight_ids(&self, layer: usize) -> (ParamId, ParamId, Option<ParamId>) {
        let mlp = self.mlp(layer);
        (mlp.w_t, mlp.w_f, mlp.query.map(|q| q.0))
    }

    /// `T_i` on the tape: the product `A_i · B_i`, or the stored tokens.
    pub fn tokens_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        match self.tokens[layer - 1] {
            TokenIds::Full(t) => Ok(bound.get(t)),
            TokenIds::LowRank { a, b } => materialize_tokens(tape, bound.get(a), bound.get(b)),
        }
    }

    /// `T_i` as a plain tensor, served from `cache` when one is supplied.
    pub fn materialize_tokens<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        layer: usize,
        cache: Option<&TokenCache<T>>,
    ) -> Result<Tensor<T>> {
        self.check_layer(layer)?;
        if let Some(cache) = cache {
            return Ok(cache.tokens(layer).clone());
        }
        match self.tokens[layer - 1] {
            TokenIds::Full(t) => Ok(params.tensor(t).clone().with_requires_grad(false)),
            TokenIds::LowRank { a, b } => {
                let mut tape = Tape::new();
                let av = tape.constant(params.tensor(a).clone());
                let bv = tape.constant(params.tensor(b).clone());
                let t = materialize_tokens(&mut tape, av, bv)?;
                Ok(tape.value(t).clone())
            }
        }
    }

    /// Computes tokens, folded token MLPs and the aggregated query once.
    pub fn precompute<T: Scalar>(&self, params: &ParamSet<T>) -> Result<TokenCache<T>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let prepared = self.prepare(&mut tape, &bound, None)?;
        let mut tokens = Vec::with_capacity(self.cfg.depth);
        let mut folded = Vec::with_capacity(self.cfg.depth);
        for i in 1..=self.cfg.depth {
            let t = prepared.tokens(i);
            let mlp = self.mlp(i);
            let full = tape.matmul(t, bound.get(mlp.w_t))?;
            let full = tape.add_bias(full, bound.get(mlp.b_t))?;
            tokens.push(tape.value(t).clone().with_requires_grad(false));
            folded.push(tape.value(full).clone().with_requires_grad(false));
        }
        Ok(TokenCache {
            tokens,
            folded,
            query: prepared.query.map(|q| tape.value(q).clone()),
        })
    }

    /// Builds everything that depends only on adapter parameters. With a
    /// cache the results enter the tape as constants (no gradients).
    pub fn prepare<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        cache: Option<&TokenCache<T>>,
    ) -> Result<PreparedTokens> {
        let m = self.cfg.m;
        let n = self.cfg.depth;
        let mut tokens = Vec::with_capacity(n);
        let mut token_mlp = Vec::with_capacity(n);
        let mut layer_qs = Vec::new();
        for i in 1..=n {
            let mlp = *self.mlp(i);
            let t = match cache {
                Some(c) => {
                    let t = tape.constant(c.tokens(i).clone());
                    let folded = tape.constant(c.folded(i).clone());
                    token_mlp.push(tape.slice_rows(folded, 1, m)?);
                    t
                }
                None => {
                    let t = self.tokens_on_tape(tape, bound, i)?;
                    token_mlp.push(token_mlp_rows(tape, t, bound.get(mlp.w_t), bound.get(mlp.b_t))?);
                    t
                }
            };
            tokens.push(t);
            if cache.is_none() {
                if let Some((w_q, b_q)) = mlp.query {
                    layer_qs.push(layer_queries(tape, t, bound.get(w_q), bound.get(b_q))?);
                }
            }
        }
        let query = match (cache, self.concat) {
            (Some(c), _) => c.query().map(|q| tape.constant(q.clone())),
            (None, Some((w, b))) => Some(aggregate_queries(tape, &layer_qs, bound.get(w), bound.get(b))?),
            (None, None) => None,
        };
        Ok(PreparedTokens {
            tokens,
            token_mlp,
            layer_queries: layer_qs,
            query,
        })
    }

    /// `Δf_i` from layer features and prepared tokens.
    pub fn refine_prepared<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prepared: &PreparedTokens,
        layer: usize,
        features: Var,
    ) -> Result<Var> {
        self.check_layer(layer)?;
        let t = prepared.tokens[layer - 1];
        let s = similarity_map(tape, features, t, self.cfg.c)?;
        let m = tape.shape(s)[1];
        let s_rest = tape.slice_cols(s, 1, m)?;
        let dbar = tape.matmul(s_rest, prepared.token_mlp[layer - 1])?;
        let mlp = self.mlp(layer);
        feature_delta(tape, dbar, features, bound.get(mlp.w_f), bound.get(mlp.b_f))
    }

    /// One full refinement step for layer `i`, computed from scratch:
    /// tokens, similarity, token delta, feature delta and (when linked)
    /// the layer query.
    pub fn rein_refine<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: usize,
        features: Var,
    ) -> Result<(Var, Option<Var>)> {
        let t = self.tokens_on_tape(tape, bound, layer)?;
        let mlp = *self.mlp(layer);
        let s = similarity_map(tape, features, t, self.cfg.c)?;
        let dbar = token_delta(tape, s, t, bound.get(mlp.w_t), bound.get(mlp.b_t))?;
        let delta = feature_delta(tape, dbar, features, bound.get(mlp.w_f), bound.get(mlp.b_f))?;
        let q = match mlp.query {
            Some((w, b)) => Some(layer_queries(tape, t, bound.get(w), bound.get(b))?),
            None => None,
        };
        Ok((delta, q))
    }

    /// A hook for [`ViTBackbone::forward`](crate::vit::ViTBackbone::forward).
    pub fn hook<'a>(&'a self, bound: &'a Bound, prepared: &'a PreparedTokens) -> ReinHook<'a> {
        ReinHook {
            adapter: self,
            bound,
            prepared,
        }
    }
}

pub struct ReinHook<'a> {
    adapter: &'a ReinAdapter,
    bound: &'a Bound,
    prepared: &'a PreparedTokens,
}

impl<T: Scalar> RefineHook<T> for ReinHook<'_> {
    fn refine(&mut self, tape: &mut Tape<T>, layer: usize, features: Var) -> Result<Var> {
        self.adapter
            .refine_prepared(tape, self.bound, self.prepared, layer, features)
    }
}

/// `T = A · B`.
pub fn materialize_tokens<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    tape.matmul(a, b)
}

/// `softmax(f · Tᵀ / √c)`, with `c` the backbone width.
pub fn similarity_map<T: Scalar>(tape: &mut Tape<T>, features: Var, tokens: Var, c: usize) -> Result<Var> {
    if tape.shape(features).get(1) != tape.shape(tokens).get(1) {
        return Err(Error::shape("similarity_map", tape.shape(features), tape.shape(tokens)));
    }
    let tt = tape.transpose(tokens)?;
    let logits = tape.matmul(features, tt)?;
    let logits = tape.scale(logits, T::of(1.0 / (c as f64).sqrt()))?;
    tape.softmax_rows(logits)
}

fn token_mlp_rows<T: Scalar>(tape: &mut Tape<T>, tokens: Var, w_t: Var, b_t: Var) -> Result<Var> {
    let m = tape.shape(tokens)[0];
    if m < 2 {
        return Err(Error::Config(format!("token length {m} leaves nothing after the first token")));
    }
    let rest = tape.slice_rows(tokens, 1, m)?;
    let h = tape.matmul(rest, w_t)?;
    tape.add_bias(h, b_t)
}

/// `S[:, 1..] · (T[1..] · W_T + b_T)`: the first token and the first
/// similarity column are dropped, so each row mixes with total weight
/// `1 − S[:, 0]`.
pub fn token_delta<T: Scalar>(tape: &mut Tape<T>, s: Var, tokens: Var, w_t: Var, b_t: Var) -> Result<Var> {
    let m = tape.shape(s)[1];
    if m < 2 {
        return Err(Error::Config(format!("token length {m} leaves nothing after the first token")));
    }
    if tape.shape(tokens)[0] != m {
        return Err(Error::shape("token_delta", tape.shape(s), tape.shape(tokens)));
    }
    let s_rest = tape.slice_cols(s, 1, m)?;
    let mlp = token_mlp_rows(tape, tokens, w_t, b_t)?;
    tape.matmul(s_rest, mlp)
}

/// `(Δf̄ + f) · W_f + b_f`.
pub fn feature_delta<T: Scalar>(tape: &mut Tape<T>, dbar: Var, features: Var, w_f: Var, b_f: Var) -> Result<Var> {
    if tape.shape(dbar) != tape.shape(features) {
        return Err(Error::shape("feature_delta", tape.shape(dbar), tape.shape(features)));
    }
    let sum = tape.add(dbar, features)?;
    let h = tape.matmul(sum, w_f)?;
    tape.add_bias(h, b_f)
}

/// `Q_i = T_i · W_Q + b_Q`.
pub fn layer_queries<T: Scalar>(tape: &mut Tape<T>, tokens: Var, w_q: Var, b_q: Var) -> Result<Var> {
    let h = tape.matmul(tokens, w_q)?;
    tape.add_bias(h, b_q)
}

/// `[max_i Q_i, mean_i Q_i, Q_N] · W + b`.
pub fn aggregate_queries<T: Scalar>(tape: &mut Tape<T>, layer_qs: &[Var], w: Var, b: Var) -> Result<Var> {
    let last = *layer_qs
        .last()
        .ok_or_else(|| Error::Contract("no layer queries to aggregate".into()))?;
    let q_max = tape.max_across(layer_qs)?;
    let q_avg = tape.mean_across(layer_qs)?;
    let cat = tape.concat_cols(&[q_max, q_avg, last])?;
    let h = tape.matmul(cat, w)?;
    tape.add_bias(h, b)
}

/// Standalone adapter with its own parameter set, seeded on the adapter
/// stream.
pub fn init_parameters<T: Scalar>(cfg: &ReinConfig, seed: u64) -> Result<(ReinAdapter, ParamSet<T>)> {
    let mut params = ParamSet::new();
    let mut r = rng::stream_rng(seed, rng::Stream::Adapter);
    let adapter = ReinAdapter::new(cfg, &mut params, &mut r)?;
    for p in params.iter_mut() {
        p.tensor.set_requires_grad(true);
    }
    Ok((adapter, params))
}
