//! The training loop: batching, one optimizer step per batch, and the
//! per-step log record.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::data::LabeledSample;
use crate::diagnostics::stage_stats;
use crate::dictionary::DistanceStats;
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, ParamStore, Rng, Tensor};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::{Error, Result};

/// Stream ids carved out of the run seed.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            lr: 1e-4,
            batch_size: 4,
            epochs: 6,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    /// Full batches per epoch; the trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len / self.batch_size
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Zero-based global step; the learning rate is the schedule at this step.
    pub step: usize,
    /// One-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Distance statistics of the dynamic dictionaries `D_0..D_L`.
    pub stages: Vec<DistanceStats>,
}

impl StepRecord {
    /// `key=value` pairs separated by spaces. Floats use the shortest
    /// representation that parses back to the same value.
    pub fn to_line(&self) -> String {
        let b = &self.loss;
        let mut s = format!(
            "step={} epoch={} lr={} total={} ce_static={} dice_static={} ce_dynamic={} dice_dynamic={} con={} intra={} inter={}",
            self.step,
            self.epoch,
            self.lr,
            b.total,
            b.ce_static,
            b.dice_static,
            b.ce_dynamic,
            b.dice_dynamic,
            b.con,
            b.intra,
            b.inter
        );
        for (l, st) in self.stages.iter().enumerate() {
            let _ = write!(s, " stage{l}_intra={} stage{l}_inter={}", st.intra, st.inter);
        }
        s
    }
}

/// A finished step together with the dictionaries it produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// `stage_dicts[l][b]`: sample `b`'s dynamic dictionary after stage `l`.
    pub stage_dicts: Vec<Vec<Tensor>>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    store: ParamStore,
    optimizer: AdamW,
    schedule: CosineSchedule,
    step: usize,
    failure: Option<Vec<(String, Tensor)>>,
}

impl Trainer {
    /// Initializes the model from the run seed and sizes the schedule for
    /// `train_len` training samples.
    pub fn new(config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.seed).substream(INIT_STREAM);
        let model = Model::new(config.model.clone(), &mut store, &mut rng)?;
        Self::with_params(config, model, store, train_len)
    }

    /// Continues from existing parameters with fresh optimizer state.
    pub fn with_params(config: TrainConfig, model: Model, store: ParamStore, train_len: usize) -> Result<Self> {
        config.validate()?;
        let per_epoch = config.steps_per_epoch(train_len);
        if per_epoch == 0 {
            return Err(Error::Data(format!(
                "{train_len} training samples do not fill one batch of {}",
                config.batch_size
            )));
        }
        let schedule = CosineSchedule::new(config.lr, per_epoch * config.epochs)?;
        let optimizer = AdamW::new(config.optimizer, &store)?;
        Ok(Self { config, model, store, optimizer, schedule, step: 0, failure: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    /// Named tensors of the step that hit a non-finite value.
    pub fn failure(&self) -> Option<&[(String, Tensor)]> {
        self.failure.as_deref()
    }

    /// Batches of sample indices for a one-based epoch, shuffled by a
    /// stream of the run seed.
    pub fn epoch_batches(&self, epoch: usize, train_len: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..train_len).collect();
        Rng::new(self.config.seed).substream(SHUFFLE_STREAM | epoch as u64).shuffle(&mut order);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() == self.config.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Forward, total loss, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &[&LabeledSample], epoch: usize) -> Result<StepOutcome> {
        let lr = self.schedule.lr(self.step);
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let labels: Vec<_> = batch.iter().map(|s| &s.label).collect();
        let mut g = Graph::new();
        let (loss, breakdown, fwd) = self.model.loss(&mut g, &self.store, &images, &labels, &self.config.loss)?;

        let traces = fwd.traces(&g);
        let stage_count = traces[0].dictionaries.len();
        let stage_dicts: Vec<Vec<Tensor>> =
            (0..stage_count).map(|l| traces.iter().map(|t| t.dictionaries[l].clone()).collect()).collect();
        if !breakdown.total.is_finite() {
            self.record_failure(&g, &fwd.branch_outputs().dynamic_logits, &stage_dicts);
            return Err(Error::NonFinite { context: format!("total loss at step {}", self.step) });
        }

        let grads = g.backward(loss)?;
        self.store.zero_grads();
        grads.accumulate_into(&mut self.store);
        let bad = self.store.iter().find(|(_, p)| p.grad.data().iter().any(|v| !v.is_finite()));
        if let Some(name) = bad.map(|(_, p)| p.name.clone()) {
            let context = format!("gradient of {name} at step {}", self.step);
            self.record_failure(&g, &fwd.branch_outputs().dynamic_logits, &stage_dicts);
            return Err(Error::NonFinite { context });
        }
        self.optimizer.step(&mut self.store, lr)?;

        let stages = stage_stats(&stage_dicts)?;
        let record = StepRecord { step: self.step, epoch, lr, loss: breakdown, stages };
        self.step += 1;
        Ok(StepOutcome { record, stage_dicts })
    }

    fn record_failure(&mut self, g: &Graph, logits: &[crate::numerics::Var], stage_dicts: &[Vec<Tensor>]) {
        let mut dump = Vec::new();
        for (b, &v) in logits.iter().enumerate() {
            dump.push((format!("dynamic_logits_{b}"), g.value(v).clone()));
        }
        for (l, dicts) in stage_dicts.iter().enumerate() {
            for (b, d) in dicts.iter().enumerate() {
                dump.push((format!("dictionary_stage{l}_{b}"), d.clone()));
            }
        }
        self.failure = Some(dump);
    }

    /// Runs every full batch of one epoch, handing each outcome to
    /// `on_step` in order.
    pub fn run_epoch<F>(&mut self, data: &[LabeledSample], epoch: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepOutcome) -> Result<()>,
    {
        for batch in self.epoch_batches(epoch, data.len()) {
            let samples: Vec<&LabeledSample> = batch.iter().map(|&i| &data[i]).collect();
            let outcome = self.train_step(&samples, epoch)?;
            on_step(&outcome)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Model, ParamStore) {
        (self.model, self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};

    fn tiny_setup(lr: f64) -> (Trainer, Vec<LabeledSample>) {
        let ds = generate(&SyntheticConfig {
            image_size: 32,
            n_classes: 3,
            train: 4,
            val: 0,
            test: 0,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig { model: ModelConfig::tiny(), lr, batch_size: 2, epochs: 2, ..TrainConfig::default() };
        (Trainer::new(cfg, ds.train.len()).unwrap(), ds.train)
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (mut t, data) = tiny_setup(0.0);
        let before = t.store().clone();
        t.train_step(&[&data[0], &data[1]], 1).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(t.store().iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn record_identity_and_numbering() {
        let (mut t, data) = tiny_setup(1e-3);
        let mut records = Vec::new();
        for epoch in 1..=2 {
            t.run_epoch(&data, epoch, |o| {
                records.push(o.record.clone());
                Ok(())
            })
            .unwrap();
        }
        assert_eq!(records.len(), 4);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.step, i);
            assert_eq!(r.loss.total, r.loss.recombine(&LossWeights::default()));
            assert_eq!(r.stages.len(), 3);
            assert!(r.to_line().starts_with(&format!("step={i} epoch=")));
        }
        assert_eq!(records[0].lr, 1e-3);
        assert!(records[3].lr <= 1e-9);
    }

    #[test]
    fn batches_drop_the_remainder_and_cover_once() {
        let (t, _) = tiny_setup(1e-4);
        let batches = t.epoch_batches(1, 7);
        assert_eq!(batches.len(), 3);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 6);
        assert_ne!(t.epoch_batches(1, 7), t.epoch_batches(2, 7));
        assert_eq!(t.epoch_batches(1, 7), batches);
    }

    #[test]
    fn same_seed_same_losses() {
        let run = || {
            let (mut t, data) = tiny_setup(1e-3);
            let mut out = Vec::new();
            t.run_epoch(&data, 1, |o| {
                out.push(o.record.to_line());
                Ok(())
            })
            .unwrap();
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_few_samples_is_a_data_error() {
        let cfg = TrainConfig { model: ModelConfig::tiny(), ..TrainConfig::default() };
        assert!(matches!(Trainer::new(cfg, 3), Err(Error::Data(_))));
    }
}
