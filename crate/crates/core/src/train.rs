//! Fine-tuning loop, evaluation and metrics logging.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::{Benchmark, Split};
use crate::error::{Error, Result};
use crate::head::{ConfusionMatrix, MiouReport};
use crate::model::SegModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Component;
use crate::rng::{stream_rng, Stream};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "REINLAB_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// Only used in full mode.
    pub lr_backbone: f64,
    pub lr_head_and_rein: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Benchmark root holding `train/`, `val/` and `test/`.
    pub data_dir: Option<PathBuf>,
    pub eval_interval: usize,
    /// Iterations averaged into the logged train loss.
    pub loss_window: usize,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(crate::config::FineTuneMode::Rein, 6),
            iterations: 2000,
            batch_size: 4,
            lr_backbone: 1e-5,
            lr_head_and_rein: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            data_dir: None,
            eval_interval: 500,
            loss_window: 100,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.clone().resolved()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.loss_window == 0 {
            return Err(Error::Config("batch_size, eval_interval and loss_window must be > 0".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head_and_rein", self.lr_head_and_rein),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn lr_for(&self, component: Component) -> f64 {
        match component {
            Component::Backbone => self.lr_backbone,
            Component::Adapter | Component::Head => self.lr_head_and_rein,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub test_miou: f64,
    pub params: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "iteration,train_loss,val_miou,test_miou,params";

    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.iteration <= last.iteration {
                return Err(Error::Contract(format!(
                    "iteration {} does not follow {}",
                    rec.iteration, last.iteration
                )));
            }
            if rec.params != last.params {
                return Err(Error::Contract("trainable parameter count changed mid-run".into()));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.train_loss, r.val_miou, r.test_miou, r.params
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Thread count from `REINLAB_THREADS`, defaulting to 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
    }
}

/// Per-class IoU over a split, fanning out over `threads` workers. The
/// confusion matrix holds integer counts, so the result does not depend on
/// the thread count.
pub fn evaluate_with_threads(model: &SegModel<f32>, split: &Split, threads: usize) -> Result<MiouReport> {
    let k = model.config().head.num_classes;
    if split.manifest.num_classes != k {
        return Err(Error::Config(format!(
            "model predicts {k} classes but the dataset has {}",
            split.manifest.num_classes
        )));
    }
    let threads = threads.max(1).min(split.len().max(1));
    let chunk = split.len().div_ceil(threads).max(1);
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|s| {
        let handles: Vec<_> = split
            .samples
            .chunks(chunk)
            .map(|samples| {
                s.spawn(move || {
                    let mut cm = ConfusionMatrix::new(k);
                    for sample in samples {
                        cm.add(&model.predict(&sample.image)?, &sample.label)?;
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = ConfusionMatrix::new(k);
    for part in parts {
        total.merge(&part?);
    }
    Ok(total.report())
}

pub fn evaluate(model: &SegModel<f32>, split: &Split) -> Result<MiouReport> {
    evaluate_with_threads(model, split, threads_from_env()?)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: &Split) -> Result<MiouReport> {
    evaluate(&ckpt.to_model()?, split)
}

/// Owns the mutable training state.
pub struct Trainer {
    cfg: TrainConfig,
    model: SegModel<f32>,
    opt: AdamW<f32>,
    rng: ChaCha8Rng,
    iteration: usize,
    window: VecDeque<f64>,
    log: MetricsLog,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = SegModel::new(cfg.model.clone(), cfg.seed)?;
        Ok(Trainer {
            opt: AdamW::new(AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            }),
            rng: stream_rng(cfg.seed, Stream::Train),
            model,
            iteration: 0,
            window: VecDeque::with_capacity(cfg.loss_window),
            log: MetricsLog::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SegModel<f32> {
        &self.model
    }

    /// Direct access for experiments; mutating parameters drops any
    /// token cache.
    pub fn model_mut(&mut self) -> &mut SegModel<f32> {
        &mut self.model
    }

    pub fn optimizer(&self) -> &AdamW<f32> {
        &self.opt
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn into_log(self) -> MetricsLog {
        self.log
    }

    pub fn window_loss(&self) -> f64 {
        self.window.iter().sum::<f64>() / self.window.len().max(1) as f64
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, self.iteration as u64, self.cfg.seed)
    }

    /// One optimizer step on a random batch from `train`. Returns the batch
    /// loss.
    pub fn step(&mut self, train: &Split) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let k = self.model.config().head.num_classes;
        if train.manifest.num_classes != k {
            return Err(Error::Config(format!(
                "model predicts {k} classes but the dataset has {}",
                train.manifest.num_classes
            )));
        }
        let mut flipped = Vec::new();
        let mut picks = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let i = self.rng.random_range(0..train.len());
            let flip = self.cfg.flip && self.rng.random_bool(0.5);
            if flip {
                flipped.push(train.samples[i].flipped());
            }
            picks.push((i, flip));
        }
        let mut flips = flipped.iter();
        let batch: Vec<_> = picks
            .iter()
            .map(|&(i, flip)| {
                let s = if flip { flips.next().expect("one per flip") } else { &train.samples[i] };
                (&s.image, s.label.as_slice())
            })
            .collect();

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let loss = self.model.batch_loss(&mut tape, &bound, &batch)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged to {value} at iteration {}",
                self.iteration + 1
            )));
        }
        tape.backward(loss)?;
        let params = self.model.params_mut();
        params.zero_grad();
        params.absorb_grads(&tape, &bound)?;
        let cfg = &self.cfg;
        self.opt.step(params, |p| cfg.lr_for(p.component))?;
        params.zero_grad();
        if self.cfg.model.rein.precompute {
            self.model.enable_precompute()?;
        }

        self.iteration += 1;
        if self.window.len() == self.cfg.loss_window {
            self.window.pop_front();
        }
        self.window.push_back(value);
        Ok(value)
    }

    /// Appends a metrics record for the current iteration.
    pub fn record(&mut self, val: &Split, test: &Split) -> Result<&MetricsRecord> {
        let rec = MetricsRecord {
            iteration: self.iteration,
            train_loss: self.window_loss(),
            val_miou: evaluate(&self.model, val)?.mean,
            test_miou: evaluate(&self.model, test)?.mean,
            params: self.model.trainable_count(),
        };
        self.log.push(rec)?;
        Ok(self.log.last().expect("just pushed"))
    }

    /// Runs the configured iterations, recording every `eval_interval`
    /// steps and at the end. `on_record` sees each record as it lands.
    pub fn run(&mut self, data: &Benchmark, mut on_record: impl FnMut(&MetricsRecord)) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            self.step(&data.train)?;
            if self.iteration % self.cfg.eval_interval == 0 || self.iteration == self.cfg.iterations {
                on_record(self.record(&data.val, &data.test)?);
            }
        }
        Ok(())
    }
}

/// Trains on an in-memory benchmark.
pub fn train_on(cfg: &TrainConfig, data: &Benchmark) -> Result<(Checkpoint, MetricsLog)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run(data, |_| {})?;
    Ok((t.checkpoint()?, t.into_log()))
}

/// Trains on the benchmark stored under `cfg.data_dir`.
pub fn train(cfg: &TrainConfig) -> Result<(Checkpoint, MetricsLog)> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| Error::Config("data_dir is required".into()))?;
    train_on(cfg, &Benchmark::read(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, params: usize) -> MetricsRecord {
        MetricsRecord {
            iteration,
            train_loss: 0.5,
            val_miou: 0.25,
            test_miou: 0.125,
            params,
        }
    }

    #[test]
    fn log_rejects_non_increasing_iterations() {
        let mut log = MetricsLog::default();
        log.push(rec(10, 3)).unwrap();
        assert!(log.push(rec(10, 3)).is_err());
        assert!(log.push(rec(20, 4)).is_err());
        log.push(rec(20, 3)).unwrap();
        assert_eq!(
            log.to_csv(),
            "iteration,train_loss,val_miou,test_miou,params\n10,0.5,0.25,0.125,3\n20,0.5,0.25,0.125,3\n"
        );
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iters": 7}"#).is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
