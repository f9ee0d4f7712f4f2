//! `reinlab` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use reinlab::audit::{count_trainable, group_thousands};
use reinlab::checkpoint::swap_adapter;
use reinlab::config::default_tap_layers;
use reinlab::data::{read_dataset, Benchmark, BenchmarkSpec, DomainSpec};
use reinlab::gradcheck::check_model_gradients;
use reinlab::head::MiouReport;
use reinlab::train::{evaluate, MetricsRecord, Trainer};
use reinlab::{Checkpoint, FineTuneMode, ReinConfig, ReinVariant, TrainConfig, ViTConfig};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-3;

/// Keys a training config must provide, either in the file or as flags.
const REQUIRED_TRAIN_KEYS: &str = "data_dir (or --data)";

const TRAIN_SCHEMA: &str = "\
config keys (JSON object, all but data_dir optional):
  data_dir          benchmark root holding train/, val/ and test/
  iterations        optimizer steps (2000)
  batch_size        images per step (4)
  lr_backbone       full mode only (1e-5)
  lr_head_and_rein  (1e-4)
  weight_decay      (0.01)
  seed              (0)
  eval_interval     (500)
  loss_window       (100)
  flip              random horizontal flips (true)
  model             {mode, vit, rein, head}; defaults to the desk model";

#[derive(Parser, Debug)]
#[command(name = "reinlab", version, about = "Token-adapter fine-tuning on synthetic segmentation benchmarks")]
struct Cli {
    /// More progress output on stderr; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only print errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source/target shift benchmark.
    GenData(GenData),
    /// Fine-tune a model and write a checkpoint plus metrics.
    #[command(after_help = TRAIN_SCHEMA)]
    Train(Train),
    /// Score a checkpoint on one split.
    Eval(Eval),
    /// Count trainable parameters for a backbone/adapter configuration.
    AuditParams(Audit),
    /// Finite-difference check of adapter and head gradients.
    Gradcheck(GradCheck),
    /// Put a donor's adapter and head onto a base checkpoint's backbone.
    SwapAdapter(Swap),
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
}

#[derive(Args, Debug)]
struct Train {
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark root; overrides `data_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<FineTuneMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Benchmark root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Optional directory for eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Audit {
    /// Backbone width.
    #[arg(long, default_value_t = 1024)]
    c: usize,
    /// Backbone depth.
    #[arg(long, default_value_t = 24)]
    layers: usize,
    /// Attention heads; only checked in full mode.
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    r: usize,
    #[arg(long, default_value_t = 256)]
    c_prime: usize,
    #[arg(long, default_value = "rein-lora", value_parser = parse_variant)]
    variant: ReinVariant,
    #[arg(long, default_value = "rein", value_parser = parse_mode)]
    mode: FineTuneMode,
    /// Print CSV instead of the aligned table.
    #[arg(long)]
    csv: bool,
    /// Optional directory for report.txt and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "rein-lora", value_parser = parse_variant)]
    variant: ReinVariant,
    /// Optional directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Swap {
    /// Checkpoint whose backbone is kept.
    #[arg(long)]
    base: PathBuf,
    /// Checkpoint whose adapter and head are taken.
    #[arg(long)]
    donor: PathBuf,
    /// Output directory; receives model.ckpt.
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<ReinVariant, String> {
    s.parse().map_err(|e: reinlab::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<FineTuneMode, String> {
    s.parse().map_err(|e: reinlab::Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(reinlab::Error),
}

impl From<reinlab::Error> for Failure {
    fn from(e: reinlab::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

struct Out {
    verbose: u8,
    quiet: bool,
}

impl Out {
    fn print(&self, s: &str) {
        if !self.quiet {
            print!("{s}");
        }
    }

    fn progress(&self, level: u8, s: &str) {
        if self.verbose >= level && !self.quiet {
            eprintln!("{s}");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = Out {
        verbose: cli.verbose,
        quiet: cli.quiet,
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a, &out),
        Command::Train(a) => train(&a, &out),
        Command::Eval(a) => eval(&a, &out),
        Command::AuditParams(a) => audit(&a, &out),
        Command::Gradcheck(a) => gradcheck(&a, &out),
        Command::SwapAdapter(a) => swap(&a, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| reinlab::Error::io(dir, e).into())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| reinlab::Error::io(path, e).into())
}

/// The resolved settings of a run, written as `config.json` in its
/// output directory.
fn write_snapshot(dir: &Path, command: &str, settings: Value) -> CliResult {
    let snap = json!({ "command": command, "settings": settings });
    let mut text = serde_json::to_string_pretty(&snap).expect("json values always serialize");
    text.push('\n');
    write_file(&dir.join("config.json"), text)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config types always serialize")
}

fn gen_data(a: &GenData, out: &Out) -> CliResult {
    let spec = BenchmarkSpec {
        num_classes: a.classes,
        size: a.size,
        train: a.train,
        val: a.val,
        test: a.test,
        seed: a.seed,
    };
    let (source, target) = (DomainSpec::source(a.classes), DomainSpec::target(a.classes));
    let bench = Benchmark::generate_with(&spec, &source, &target)?;
    create_dir(&a.out)?;
    bench.write(&a.out)?;
    write_snapshot(
        &a.out,
        "gen-data",
        json!({ "benchmark": to_value(&spec), "source": to_value(&source), "target": to_value(&target) }),
    )?;
    out.print(&format!(
        "wrote {} train, {} val, {} test scenes ({}x{}, K={}) to {}\n",
        a.train,
        a.val,
        a.test,
        a.size,
        a.size,
        a.classes,
        a.out.display()
    ));
    Ok(())
}

fn load_train_config(a: &Train) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| reinlab::Error::io(path, e))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                Failure::Usage(format!(
                    "bad config {}: {e}\nrequired keys: {REQUIRED_TRAIN_KEYS}\n\n{TRAIN_SCHEMA}",
                    path.display()
                ))
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    if cfg.data_dir.is_none() {
        return Err(Failure::Usage(format!(
            "missing training config; required keys: {REQUIRED_TRAIN_KEYS}\n\n{TRAIN_SCHEMA}"
        )));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(n) = a.eval_interval {
        cfg.eval_interval = n;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn record_line(r: &MetricsRecord) -> String {
    format!(
        "iter {:>6}  loss {:.4}  val mIoU {:.4}  test mIoU {:.4}  params {}",
        r.iteration,
        r.train_loss,
        r.val_miou,
        r.test_miou,
        group_thousands(r.params as u64)
    )
}

fn train(a: &Train, out: &Out) -> CliResult {
    let cfg = load_train_config(a)?;
    let data = Benchmark::read(cfg.data_dir.as_deref().expect("checked above"))?;
    create_dir(&a.out)?;
    write_snapshot(&a.out, "train", to_value(&cfg))?;
    out.progress(
        1,
        &format!("training {} for {} iterations, seed {}", cfg.model.mode, cfg.iterations, cfg.seed),
    );

    let mut trainer = Trainer::new(cfg)?;
    let run = trainer.run(&data, |r| out.progress(1, &record_line(r)));
    // The log so far is kept even when the run aborts.
    trainer.log().write_csv(&a.out.join("metrics.csv"))?;
    run?;
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&a.out.join("model.ckpt"))?;
    if let Some(r) = trainer.log().last() {
        out.print(&format!("{}\n", record_line(r)));
    }
    Ok(())
}

fn report_text(rep: &MiouReport) -> String {
    let mut s = String::from("class  IoU\n");
    for (c, iou) in rep.per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(s, "{c:>5}  {v:.4}").unwrap(),
            None => writeln!(s, "{c:>5}  -").unwrap(),
        }
    }
    writeln!(s, "mIoU   {:.4}", rep.mean).unwrap();
    s
}

fn eval(a: &Eval, out: &Out) -> CliResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let split = read_dataset(&a.data.join(&a.split))?;
    let rep = evaluate(&ckpt.to_model()?, &split)?;
    out.print(&report_text(&rep));
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_snapshot(
            dir,
            "eval",
            json!({ "checkpoint": a.checkpoint, "data": a.data, "split": a.split }),
        )?;
        let mut text = serde_json::to_string_pretty(&rep).expect("reports serialize");
        text.push('\n');
        write_file(&dir.join("eval.json"), text)?;
    }
    Ok(())
}

fn audit(a: &Audit, out: &Out) -> CliResult {
    let vit = ViTConfig {
        dim: a.c,
        depth: a.layers,
        heads: a.heads,
        tap_layers: default_tap_layers(a.layers),
        ..ViTConfig::default()
    };
    let rein = ReinConfig::for_backbone(&vit, a.m, a.r, a.c_prime, a.variant);
    let rep = count_trainable(&vit, &rein, a.mode).map_err(|e| Failure::Usage(e.to_string()))?;
    out.print(&if a.csv { rep.to_csv() } else { rep.to_text() });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_snapshot(
            dir,
            "audit-params",
            json!({ "mode": a.mode, "vit": to_value(&vit), "rein": to_value(&rein) }),
        )?;
        write_file(&dir.join("report.txt"), rep.to_text())?;
        write_file(&dir.join("report.csv"), rep.to_csv())?;
    }
    Ok(())
}

fn gradcheck(a: &GradCheck, out: &Out) -> CliResult {
    let rep = check_model_gradients(a.seed, a.variant)?;
    let width = rep.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut csv = String::from("name,component,rel_error\n");
    for r in &rep.rows {
        out.progress(1, &format!("{:<width$}  {:>9}  {:.3e}", r.name, r.component.to_string(), r.rel_error));
        writeln!(csv, "{},{},{:e}", r.name, r.component, r.rel_error).unwrap();
    }
    let max = rep.max_rel_error();
    out.print(&format!(
        "gradcheck {} seed {}: {} tensors, max relative error {max:.3e}\n",
        a.variant,
        a.seed,
        rep.rows.len()
    ));
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_snapshot(dir, "gradcheck", json!({ "seed": a.seed, "variant": a.variant }))?;
        write_file(&dir.join("gradcheck.csv"), csv)?;
    }
    if !(max <= GRADCHECK_TOL) {
        return Err(Failure::Runtime(reinlab::Error::Numeric(format!(
            "max relative error {max:.3e} exceeds {GRADCHECK_TOL:e}"
        ))));
    }
    Ok(())
}

fn swap(a: &Swap, out: &Out) -> CliResult {
    let base = Checkpoint::load(&a.base)?;
    let donor = Checkpoint::load(&a.donor)?;
    let swapped = swap_adapter(&base, &donor)?;
    create_dir(&a.out)?;
    write_snapshot(&a.out, "swap-adapter", json!({ "base": a.base, "donor": a.donor }))?;
    let path = a.out.join("model.ckpt");
    swapped.save(&path)?;
    out.print(&format!("wrote {}\n", path.display()));
    Ok(())
}
