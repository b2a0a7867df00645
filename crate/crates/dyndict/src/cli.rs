//! The `dyndict` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dyndict_core::data::Split;
use dyndict_core::summary::model_summary;

use crate::config::RunConfig;
use crate::error::{exit, Error, Result};
use crate::runner::{self, TrainOptions};
use crate::{ablate, checkpoint, dataset, fsutil};

#[derive(Debug, Parser)]
#[command(name = "dyndict", version, about = "Class-dictionary semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset root with `train/`, `val/` and optionally `test/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset into `--out`; `--seed` sets the data seed.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train, validating every epoch and keeping the best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint with the dynamic branch.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Write label maps and colourised predictions to `<out>/predictions`.
        #[arg(long)]
        dump_predictions: bool,
        /// Score the labels themselves instead of model predictions.
        #[arg(long)]
        bypass: bool,
    },
    /// Train every ablation variant on shared data and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict to one group: loss, stages, components or width.
        #[arg(long)]
        table: Option<String>,
    },
    /// Parameter count and multiply-accumulates of one forward.
    Summary {
        #[command(flatten)]
        common: Common,
        /// Input side length.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// End-to-end finite-difference gradient check (tiny config by default).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(common: &Common, fallback: RunConfig) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback,
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(d) = &common.data {
        config.data_dir = Some(d.clone());
    }
    if let Some(o) = &common.out {
        config.out_dir = Some(o.clone());
    }
    config.validate()?;
    Ok(config)
}

fn require_out(config: &RunConfig) -> Result<&Path> {
    config
        .out_dir
        .as_deref()
        .ok_or_else(|| Error::Core(dyndict_core::Error::Config("an output directory is required (--out)".into())))
}

/// Runs one parsed command, returning the text for stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth { common } => {
            let mut config = load_config(&Common { seed: None, ..common.clone() }, RunConfig::default())?;
            if let Some(seed) = common.seed {
                config.synth.seed = seed;
            }
            let out = require_out(&config)?.to_path_buf();
            let ds = dyndict_core::data::generate(&config.synth)?;
            dataset::write_dataset(&out, &ds)?;
            config.save(&out.join(checkpoint::CONFIG_FILE))?;
            Ok(format!(
                "wrote {} train, {} val, {} test samples to {}\n",
                ds.train.len(),
                ds.val.len(),
                ds.test.len(),
                out.display()
            ))
        }
        Command::Train { common } => {
            let config = load_config(&common, RunConfig::default())?;
            let out = require_out(&config)?.to_path_buf();
            let splits = runner::load_splits(&config)?;
            let outcome = runner::train(&config, &splits, &TrainOptions { out: Some(out.clone()), progress: true })?;
            let best = outcome.best();
            let mut s = format!("best epoch {} val mIoU {:.4}\n", best.epoch, best.val.miou);
            s.push_str(&best.val.table());
            if let Some(test) = &outcome.test {
                s.push_str(&format!("test mIoU {:.4}\n", test.miou));
            }
            Ok(s)
        }
        Command::Eval { common, checkpoint: ckpt, split, dump_predictions, bypass } => {
            let (stored, model, store) = checkpoint::load(&ckpt)?;
            let config = load_config(&common, stored)?;
            let split: Split = split.into();
            let splits = runner::load_splits(&config)?;
            let dump = if dump_predictions { Some(require_out(&config)?.join("predictions")) } else { None };
            let ignore = config.train.loss.ignore_label;
            let run = runner::evaluate_split(&model, &store, splits.get(split), ignore, bypass, dump.as_deref())?;
            let report = &run.evaluation.report;
            if let Some(out) = &config.out_dir {
                fsutil::create_dir_all(out)?;
                fsutil::write_atomic(&out.join(format!("{}_metrics.txt", split.name())), report.key_values().as_bytes())?;
                fsutil::write_atomic(&out.join(format!("{}_table.txt", split.name())), report.table().as_bytes())?;
            }
            Ok(report.table())
        }
        Command::Ablate { common, table } => {
            let config = load_config(&common, RunConfig::default())?;
            let mut variants = ablate::standard_variants();
            if let Some(t) = &table {
                variants.retain(|v| &v.table == t);
                if variants.is_empty() {
                    return Err(dyndict_core::Error::Config(format!("unknown ablation table `{t}`")).into());
                }
            }
            let splits = runner::load_splits(&config)?;
            let rows = ablate::run(&config, &variants, &splits, true)?;
            let text = ablate::table(&rows);
            if let Some(out) = &config.out_dir {
                fsutil::create_dir_all(out)?;
                fsutil::write_atomic(&out.join("ablation.txt"), text.as_bytes())?;
                fsutil::write_atomic(&out.join("ablation_config.txt"), ablate::config_echo(&rows).as_bytes())?;
            }
            Ok(text)
        }
        Command::Summary { common, size } => {
            let config = load_config(&common, RunConfig::default())?;
            let mut store = dyndict_core::numerics::ParamStore::new();
            let model = dyndict_core::model::Model::new(
                config.train.model.clone(),
                &mut store,
                &mut dyndict_core::numerics::Rng::new(config.train.seed),
            )?;
            let s = model_summary(&model, &store, size, size)?;
            Ok(format!("params={}\nmacs={}\ninput={size}x{size}\n", s.params, s.macs))
        }
        Command::Gradcheck { common, eps, tolerance } => {
            let config = load_config(&common, RunConfig::tiny())?;
            let report = runner::gradcheck(&config, eps)?;
            let worst = report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
            let text = format!(
                "entries={} max_relative_error={:e} worst={worst} loss={}\n",
                report.entries_checked, report.max_relative_error, report.loss
            );
            if report.max_relative_error >= tolerance {
                return Err(dyndict_core::Error::Contract(format!("gradient check failed: {text}")).into());
            }
            Ok(text)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
