//! Token-based feature refinement for plain vision transformers.
//!
//! A small from-scratch tensor/autograd stack, a ViT backbone with a
//! per-layer refinement hook, the token adapter, a query-based decode head,
//! a synthetic segmentation benchmark and a training harness.

pub mod audit;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod rein;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Tape, Var};
pub use config::{FineTuneMode, HeadConfig, ModelConfig, ReinConfig, ReinVariant, ViTConfig};
pub use error::{Error, Result};
pub use model::SegModel;
pub use params::{Component, ParamSet};
pub use tensor::{Scalar, Tensor};
pub use audit::{count_trainable, ParamReport};
pub use checkpoint::{swap_adapter, Checkpoint};
pub use data::{Benchmark, BenchmarkSpec, DomainSpec, SceneSample, Split};
pub use train::{evaluate, train, train_on, MetricsLog, TrainConfig};
