//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::cost::{self, Table1Config};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::layers::{PatchPolicy, Topology};
use crate::model::{ModelConfig, StripMlp, Variant};
use crate::parallel;
use crate::train::{self, Bound, Metric, TrainInputs};

#[derive(Debug, Parser)]
#[command(
    name = "strip-mlp",
    version,
    about = "Strip-MLP vision model: cost analysis, gradient checks, training and evaluation",
    after_help = "Environment: STRIP_MLP_THREADS sets the worker count (0 = serial, the default)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Token-mixing cost comparison at stages 1 and 4.
    Table1 {
        /// Also write the report as JSON to this path.
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Per-part parameter and FLOP breakdown of a model variant.
    Analyze {
        /// Model variant: tstar, t, s or b.
        #[arg(long, default_value = "tstar")]
        variant: Variant,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        /// Channel patches of each CGSMM: c1, c2, c4, c8 or one.
        #[arg(long, default_value = "c4")]
        patches: PatchPolicy,
        /// Side of the square input image.
        #[arg(long, default_value_t = 224)]
        image_size: usize,
        #[arg(long, default_value_t = 4)]
        patch_size: usize,
        /// Expansion ratio of the channel mixing block.
        #[arg(long, default_value_t = 3)]
        channel_ratio: usize,
        /// cascade or parallel.
        #[arg(long, default_value = "cascade")]
        topology: Topology,
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient checks; exits non-zero on any failure.
    Gradcheck {
        /// Run one case only (see --list).
        #[arg(long)]
        layer: Option<String>,
        /// Print the case names and exit.
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = gradsuite::DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = gradsuite::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Train from a TOML run configuration; flags override file values.
    Train {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// [default: from config]
        #[arg(long)]
        seed: Option<u64>,
        /// [default: from config]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: from config]
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate [default: from config]
        #[arg(long)]
        lr: Option<f64>,
        /// Stop after this many optimizer steps [default: from config]
        #[arg(long)]
        max_steps: Option<usize>,
        /// [default: from config]
        #[arg(long, value_name = "PATH")]
        run_dir: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint on the configured test set (or the training set if none).
    Eval {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// [default: from config]
        #[arg(long)]
        batch_size: Option<usize>,
    },
}

/// Parses `argv` (program name first) and runs the command.
/// Exit codes: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn write_json(path: &Option<PathBuf>, json: Result<String>) -> Result<()> {
    if let Some(p) = path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, json?)?;
    }
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Table1 { json } => {
            let report = cost::table1(&Table1Config::default())?;
            write!(out, "{}", report.to_text())?;
            write_json(&json, report.to_json())?;
            Ok(0)
        }
        Command::Analyze { variant, classes, patches, image_size, patch_size, channel_ratio, topology, json } => {
            let cfg = ModelConfig {
                num_classes: classes,
                patch_policy: patches,
                image_size,
                patch_size,
                channel_ratio,
                topology,
                ..ModelConfig::variant(variant)
            };
            let report = cost::model_report(&cfg)?;
            writeln!(out, "# variant {variant}")?;
            write!(out, "{}", report.to_text())?;
            writeln!(out, "parameter tensors enumerate to {} trainable values", report.enumerated_params)?;
            write_json(&json, report.to_json())?;
            Ok(0)
        }
        Command::Gradcheck { layer, list, eps, tol, seed, json } => {
            if list {
                for name in gradsuite::case_names() {
                    writeln!(out, "{name}")?;
                }
                return Ok(0);
            }
            let checks = gradsuite::run_suite(layer.as_deref(), seed, eps, tol)?;
            for c in &checks {
                writeln!(
                    out,
                    "{} {:<22} {:<40} coords {:>5}  max rel err {:.3e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.case,
                    c.tensor,
                    c.coordinates,
                    c.max_rel_error
                )?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            writeln!(out, "{} tensors checked, {failed} failed (tol {tol:e}, eps {eps:e})", checks.len())?;
            write_json(&json, serde_json::to_string_pretty(&checks).map_err(|e| Error::Parse(e.to_string())))?;
            Ok(if failed == 0 { 0 } else { 1 })
        }
        Command::Train { config, seed, epochs, batch_size, lr, max_steps, run_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = lr {
                cfg.train.schedule.base_lr = lr;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = max_steps;
            }
            if let Some(d) = run_dir {
                cfg.run_dir = d;
            }
            cfg.validate()?;
            let written = cfg.write_effective()?;
            writeln!(out, "effective config: {}", written.display())?;
            writeln!(out, "threads: {}", parallel::threads())?;
            let (train_ds, test_ds) = cfg.data.load(cfg.model.image_size, cfg.seed)?;
            let (model, mut store) = StripMlp::build(&cfg.model, cfg.seed)?;
            writeln!(
                out,
                "model: {} trainable values; {} train / {} test samples",
                store.trainable_count(),
                train_ds.len(),
                test_ds.as_ref().map_or(0, |d| d.len())
            )?;
            let inputs =
                TrainInputs { train: &train_ds, test: test_ds.as_ref(), run_dir: Some(&cfg.run_dir), seed: cfg.seed };
            let summary = train::train(&model, &mut store, &cfg.train, &inputs)?;
            for m in &summary.metrics {
                if let Metric::Epoch { epoch, step, train_top1, test_top1 } = m {
                    write!(out, "epoch {epoch} step {step} train top-1 {:.4}", train_top1)?;
                    if let Some(t) = test_top1 {
                        write!(out, " test top-1 {t:.4}")?;
                    }
                    writeln!(out)?;
                }
            }
            if let Some(p) = summary.checkpoints.last() {
                writeln!(out, "checkpoint: {}", p.display())?;
            }
            Ok(0)
        }
        Command::Eval { config, checkpoint, batch_size } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let (train_ds, test_ds) = cfg.data.load(cfg.model.image_size, cfg.seed)?;
            let (which, ds) = match &test_ds {
                Some(t) => ("test", t),
                None => ("train", &train_ds),
            };
            let (model, mut store) = StripMlp::build(&cfg.model, cfg.seed)?;
            load_checkpoint(&checkpoint, &mut store, None)?;
            let acc = train::evaluate(
                &Bound { model: &model, store: &store },
                ds,
                batch_size.unwrap_or(cfg.eval_batch_size),
            )?;
            writeln!(out, "{which} top-1 {acc:.6} ({} samples)", ds.len())?;
            Ok(0)
        }
    }
}
