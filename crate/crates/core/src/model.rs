//! Backbone + optional adapter + head, with mode-dependent trainability.

use crate::autograd::{Tape, Var};
use crate::config::{FineTuneMode, ModelConfig};
use crate::error::{Error, Result};
use crate::head::{self, DecodeHead, HeadInputs, SegPrediction};
use crate::params::{Bound, Component, ParamSet};
use crate::rein::{PreparedTokens, ReinAdapter, TokenCache};
use crate::rng::{self, Stream};
use crate::tensor::{Scalar, Tensor};
use crate::vit::{RefineHook, ViTBackbone};

#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar = f32> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    backbone: ViTBackbone,
    adapter: Option<ReinAdapter>,
    head: DecodeHead,
    upsample: Tensor<T>,
    cache: Option<TokenCache<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub taps: Vec<Var>,
    pub features: Var,
    pub query: Option<Var>,
    pub pred: SegPrediction,
}

/// Components whose trainable scalars count as "trainable parameters":
/// everything except the decode head.
pub const COUNTED: [Component; 2] = [Component::Backbone, Component::Adapter];

impl<T: Scalar> SegModel<T> {
    /// Builds all components from `seed`; each draws from its own stream.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.resolved()?;
        let mut params = ParamSet::new();
        let backbone = ViTBackbone::new(&cfg.vit, &mut params, &mut rng::stream_rng(seed, Stream::Backbone))?;
        let adapter = if cfg.uses_adapter() {
            Some(ReinAdapter::new(&cfg.rein, &mut params, &mut rng::stream_rng(seed, Stream::Adapter))?)
        } else {
            None
        };
        let inputs = HeadInputs {
            tap_count: cfg.vit.tap_layers.len(),
            width: cfg.vit.dim,
            query_dim: cfg.rein.c_prime,
            linked: cfg.links_queries(),
        };
        let head = DecodeHead::new(&cfg.head, inputs, &mut params, &mut rng::stream_rng(seed, Stream::Head))?;
        let upsample = head::upsample_matrix(cfg.vit.grid(), cfg.vit.image_size);
        let mut model = SegModel {
            cfg,
            params,
            backbone,
            adapter,
            head,
            upsample,
            cache: None,
        };
        model.apply_mode();
        if model.cfg.rein.precompute {
            model.enable_precompute()?;
        }
        Ok(model)
    }

    fn apply_mode(&mut self) {
        let (backbone, adapter) = match self.cfg.mode {
            FineTuneMode::Full => (true, false),
            FineTuneMode::Freeze => (false, false),
            FineTuneMode::Rein => (false, true),
        };
        self.params.set_trainable(Component::Backbone, backbone);
        self.params.set_trainable(Component::Adapter, adapter);
        self.params.set_trainable(Component::Head, true);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Mutable parameters. Drops the token cache, which would go stale.
    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.cache = None;
        &mut self.params
    }

    pub fn backbone(&self) -> &ViTBackbone {
        &self.backbone
    }

    pub fn adapter(&self) -> Option<&ReinAdapter> {
        self.adapter.as_ref()
    }

    pub fn head(&self) -> &DecodeHead {
        &self.head
    }

    /// Serves tokens, folded token MLPs and the aggregated query from a
    /// cache until parameters change. Cached values carry no gradient.
    pub fn enable_precompute(&mut self) -> Result<()> {
        self.cache = match &self.adapter {
            Some(a) => Some(a.precompute(&self.params)?),
            None => None,
        };
        Ok(())
    }

    pub fn precompute_enabled(&self) -> bool {
        self.cache.is_some()
    }

    /// Trainable scalars outside the head.
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count(&COUNTED)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    /// Adapter state shared by every image of one forward batch.
    pub fn prepare(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Option<PreparedTokens>> {
        self.adapter
            .as_ref()
            .map(|a| a.prepare(tape, bound, self.cache.as_ref()))
            .transpose()
    }

    pub fn forward_prepared(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        prepared: Option<&PreparedTokens>,
        image: &Tensor<T>,
    ) -> Result<ModelOutput> {
        let out = match (&self.adapter, prepared) {
            (Some(a), Some(p)) => {
                let mut hook = a.hook(bound, p);
                self.backbone
                    .forward(tape, bound, image, Some(&mut hook as &mut dyn RefineHook<T>))?
            }
            (None, _) => self.backbone.forward(tape, bound, image, None)?,
            (Some(_), None) => return Err(Error::Contract("adapter tokens were not prepared".into())),
        };
        let query = if self.cfg.links_queries() {
            prepared.and_then(|p| p.query())
        } else {
            None
        };
        let up = tape.constant(self.upsample.clone());
        let pred = self.head.decode(tape, bound, &out.taps, query, up)?;
        Ok(ModelOutput {
            taps: out.taps,
            features: out.out,
            query,
            pred,
        })
    }

    /// Single-image forward on a fresh binding.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<(Bound, ModelOutput)> {
        let bound = self.bind(tape);
        let prepared = self.prepare(tape, &bound)?;
        let out = self.forward_prepared(tape, &bound, prepared.as_ref(), image)?;
        Ok((bound, out))
    }

    /// Mean segmentation loss over a batch, recorded on `tape`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &[(&Tensor<T>, &[u8])],
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let prepared = self.prepare(tape, bound)?;
        let mut total: Option<Var> = None;
        for (image, labels) in batch {
            let out = self.forward_prepared(tape, bound, prepared.as_ref(), image)?;
            let loss = head::segmentation_loss(tape, out.pred.logits, labels)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        tape.scale(total.expect("non-empty batch"), T::of(1.0 / batch.len() as f64))
    }

    /// Fused `[K × H·W]` logits for one image.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (_, out) = self.forward(&mut tape, image)?;
        Ok(tape.value(out.pred.logits).clone())
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<u8>> {
        head::argmax_labels(&self.logits(image)?)
    }
}
