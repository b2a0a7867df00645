//! Training and evaluation runs with their on-disk artifacts.
//!
//! A training run directory holds:
//!
//! - `config.txt`: the effective configuration
//! - `train.log`: one `key=value` record per step, plus one validation
//!   record per epoch
//! - `timing.txt`: wall-clock seconds per epoch, kept apart so logs of
//!   equal-seed runs are byte-identical
//! - `diagnostics.txt`: per-stage dictionary distance means per epoch
//! - `trace/epoch<E>_stage<l>.dstn`: every dynamic dictionary of the epoch
//!   as a `steps×B×N×C′` tensor
//! - `checkpoint_best/`, `checkpoint_final/`
//! - `test_metrics.txt`: the best checkpoint on the test split
//! - `nan_dump/`: the tensors of a step that went non-finite

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dyndict_core::data::{colorize, generate, LabeledSample, Split, DEFAULT_PALETTE};
use dyndict_core::diagnostics::{series_text, StageAccumulator, EpochSeries};
use dyndict_core::eval::{evaluate, evaluate_maps, Evaluation};
use dyndict_core::metrics::MetricReport;
use dyndict_core::model::Model;
use dyndict_core::numerics::{ParamStore, Tensor};
use dyndict_core::train::{StepRecord, Trainer};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::{checkpoint, dataset, dstn, fsutil, pnm};

pub const LOG_FILE: &str = "train.log";
pub const TIMING_FILE: &str = "timing.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const TRACE_DIR: &str = "trace";
pub const BEST_DIR: &str = "checkpoint_best";
pub const FINAL_DIR: &str = "checkpoint_final";
pub const TEST_METRICS_FILE: &str = "test_metrics.txt";
pub const NAN_DIR: &str = "nan_dump";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Reads the splits from `data_dir`, or generates them from the
/// synthetic settings when no directory is configured.
pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    match &config.data_dir {
        Some(root) => Ok(Splits {
            train: dataset::read_split(root, Split::Train)?,
            val: dataset::read_split(root, Split::Val)?,
            test: read_optional(root, Split::Test)?,
        }),
        None => {
            let ds = generate(&config.synth)?;
            Ok(Splits { train: ds.train, val: ds.val, test: ds.test })
        }
    }
}

fn read_optional(root: &Path, split: Split) -> Result<Vec<LabeledSample>> {
    if root.join(split.name()).is_dir() {
        dataset::read_split(root, split)
    } else {
        Ok(Vec::new())
    }
}

pub fn epoch_record(epoch: usize, report: &MetricReport) -> String {
    format!("epoch={epoch} val_oa={} val_miou={} val_mf1={}", report.oa, report.miou, report.mf1)
}

pub fn trace_file(epoch: usize, stage: usize) -> String {
    format!("epoch{epoch:03}_stage{stage}.dstn")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub val: MetricReport,
    pub series: EpochSeries,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub model: Model,
    pub final_store: ParamStore,
    pub best_store: ParamStore,
    /// Best checkpoint on the test split, when the split is non-empty.
    pub test: Option<MetricReport>,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochSummary {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: Option<PathBuf>,
    /// Prints one line per epoch to stderr.
    pub progress: bool,
}

struct Artifacts {
    dir: PathBuf,
    log: BufWriter<File>,
    timing: String,
}

impl Artifacts {
    fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fsutil::create_dir_all(&dir.join(TRACE_DIR))?;
        config.save(&dir.join(checkpoint::CONFIG_FILE))?;
        let path = dir.join(LOG_FILE);
        let log = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { dir: dir.to_path_buf(), log: BufWriter::new(log), timing: String::new() })
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join(LOG_FILE), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(self.dir.join(LOG_FILE), e))
    }
}

/// Trains for the configured epochs, validating after each one and
/// keeping the parameters with the best validation mIoU (earliest epoch on
/// ties).
pub fn train(config: &RunConfig, splits: &Splits, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if splits.val.is_empty() {
        return Err(Error::Core(dyndict_core::Error::Data("the validation split is empty".into())));
    }
    let mut artifacts = options.out.as_deref().map(|d| Artifacts::create(d, config)).transpose()?;
    let mut trainer = Trainer::new(config.train.clone(), splits.train.len())?;
    let ignore = config.train.loss.ignore_label;
    let stage_count = config.train.model.decoder().effective_stages() + 1;

    let mut records = Vec::new();
    let mut epochs: Vec<EpochSummary> = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut diagnostics = String::new();
    for epoch in 1..=config.train.epochs {
        let start = Instant::now();
        let mut acc = StageAccumulator::new(stage_count);
        let mut traces: Vec<Vec<f64>> = vec![Vec::new(); stage_count];
        let mut steps = 0;
        let result = trainer.run_epoch(&splits.train, epoch, |o| {
            acc.add(&o.record.stages)?;
            for (l, dicts) in o.stage_dicts.iter().enumerate() {
                for d in dicts {
                    traces[l].extend_from_slice(d.data());
                }
            }
            steps += 1;
            records.push(o.record.clone());
            if let Some(a) = artifacts.as_mut() {
                a.line(&o.record.to_line()).map_err(|e| dyndict_core::Error::Contract(e.to_string()))?;
            }
            Ok(())
        });
        if let Err(e) = result {
            if let Some(a) = artifacts.as_mut() {
                a.flush()?;
                if let Some(dump) = trainer.failure() {
                    write_dump(&a.dir.join(NAN_DIR), dump)?;
                }
            }
            return Err(e.into());
        }

        let val = evaluate(trainer.model(), trainer.store(), &splits.val, ignore, false)?;
        let series = acc.finish(epoch)?;
        if best.as_ref().is_none_or(|(_, m, _)| val.report.miou > *m) {
            best = Some((epoch, val.report.miou, trainer.store().clone()));
            if let Some(a) = &artifacts {
                checkpoint::save(&a.dir.join(BEST_DIR), config, trainer.store())?;
            }
        }
        diagnostics.push_str(&series_text(std::slice::from_ref(&series)));
        if let Some(a) = artifacts.as_mut() {
            a.line(&epoch_record(epoch, &val.report))?;
            a.flush()?;
            let (b, n, c) = (config.train.batch_size, config.train.model.n_classes, config.train.model.embed_dim);
            for (l, data) in traces.into_iter().enumerate() {
                let t = Tensor::new(vec![steps, b, n, c], data)?;
                dstn::save_tensor(&a.dir.join(TRACE_DIR).join(trace_file(epoch, l)), &t)?;
            }
            fsutil::write_atomic(&a.dir.join(DIAGNOSTICS_FILE), diagnostics.as_bytes())?;
            a.timing.push_str(&format!("epoch={epoch} seconds={:.3}\n", start.elapsed().as_secs_f64()));
            fsutil::write_atomic(&a.dir.join(TIMING_FILE), a.timing.as_bytes())?;
        }
        if options.progress {
            eprintln!(
                "epoch {epoch}/{}: val mIoU {:.4} OA {:.4} ({:.1}s)",
                config.train.epochs,
                val.report.miou,
                val.report.oa,
                start.elapsed().as_secs_f64()
            );
        }
        epochs.push(EpochSummary { epoch, val: val.report, series });
    }

    let (best_epoch, _, best_store) = best.expect("at least one epoch ran");
    let (model, final_store) = trainer.into_parts();
    let test = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &best_store, &splits.test, ignore, false)?.report)
    };
    if let Some(a) = &artifacts {
        checkpoint::save(&a.dir.join(FINAL_DIR), config, &final_store)?;
        if let Some(report) = &test {
            fsutil::write_atomic(&a.dir.join(TEST_METRICS_FILE), report.key_values().as_bytes())?;
        }
    }
    Ok(TrainOutcome { records, epochs, best_epoch, model, final_store, best_store, test })
}

fn write_dump(dir: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fsutil::create_dir_all(dir)?;
    for (name, t) in tensors {
        dstn::save_tensor(&dir.join(format!("{name}.dstn")), t)?;
    }
    Ok(())
}

/// Predictions and metrics of one split.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub evaluation: Evaluation,
    pub static_decodes: usize,
}

/// Evaluates with the dynamic branch, or scores the labels themselves
/// when `bypass` is set. Predictions are written to `dump` as label maps
/// and colourised images.
pub fn evaluate_split(
    model: &Model,
    store: &ParamStore,
    samples: &[LabeledSample],
    ignore: u8,
    bypass: bool,
    dump: Option<&Path>,
) -> Result<EvalRun> {
    let before = model.static_decode_count();
    let evaluation = if bypass {
        if samples.is_empty() {
            return Err(Error::Core(dyndict_core::Error::Contract("cannot evaluate an empty split".into())));
        }
        let labels: Vec<_> = samples.iter().map(|s| &s.label).collect();
        let preds: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
        evaluate_maps(&preds, &labels, model.config().n_classes, ignore)?
    } else {
        evaluate(model, store, samples, ignore, dump.is_some())?
    };
    if let Some(dir) = dump {
        fsutil::create_dir_all(dir)?;
        for (i, pred) in evaluation.predictions.iter().enumerate() {
            pnm::write_pgm(&dir.join(format!("{i:05}.pgm")), pred)?;
            pnm::write_rgb(&dir.join(format!("{i:05}.ppm")), &colorize(pred, &DEFAULT_PALETTE, ignore)?)?;
        }
    }
    Ok(EvalRun { evaluation, static_decodes: model.static_decode_count() - before })
}

/// End-to-end finite-difference check of every parameter against the
/// total loss of one batch of `batch_size` training samples.
pub fn gradcheck(config: &RunConfig, eps: f64) -> Result<dyndict_core::numerics::GradCheckReport> {
    use dyndict_core::numerics::{check_gradients_replayed, Rng, Selection};
    config.validate()?;
    let synth = dyndict_core::data::SyntheticConfig { train: config.train.batch_size, val: 0, test: 0, ..config.synth.clone() };
    let data = generate(&synth)?;
    let mut store = ParamStore::new();
    let model = Model::new(config.train.model.clone(), &mut store, &mut Rng::new(config.train.seed))?;
    let images: Vec<&Tensor> = data.train.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = data.train.iter().map(|s| &s.label).collect();
    let weights = config.train.loss;
    Ok(check_gradients_replayed(&mut store, eps, &Selection::All, |p, g| {
        Ok(model.loss(g, p, &images, &labels, &weights)?.0)
    })?)
}
