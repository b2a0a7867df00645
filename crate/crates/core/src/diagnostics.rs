//! Per-stage dictionary distance series over training.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::dictionary::{dictionary_distance_stats, DistanceStats};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// `stage_dicts[l][b]` is sample `b`'s dictionary after stage `l`.
pub fn stage_stats(stage_dicts: &[Vec<Tensor>]) -> Result<Vec<DistanceStats>> {
    stage_dicts
        .iter()
        .map(|dicts| {
            let refs: Vec<&Tensor> = dicts.iter().collect();
            dictionary_distance_stats(&refs)
        })
        .collect()
}

/// Mean of per-batch statistics for every stage over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct StageAccumulator {
    intra: Vec<f64>,
    inter: Vec<f64>,
    batches: usize,
    degenerate: bool,
}

impl StageAccumulator {
    pub fn new(stages: usize) -> Self {
        Self { intra: vec![0.0; stages], inter: vec![0.0; stages], batches: 0, degenerate: false }
    }

    pub fn add(&mut self, stats: &[DistanceStats]) -> Result<()> {
        if stats.len() != self.intra.len() {
            return Err(Error::Contract(alloc::format!(
                "expected {} stages, got {}",
                self.intra.len(),
                stats.len()
            )));
        }
        for (l, s) in stats.iter().enumerate() {
            self.intra[l] += s.intra;
            self.inter[l] += s.inter;
            self.degenerate |= s.degenerate;
        }
        self.batches += 1;
        Ok(())
    }

    pub fn finish(&self, epoch: usize) -> Result<EpochSeries> {
        if self.batches == 0 {
            return Err(Error::Contract("no batches were accumulated".into()));
        }
        let k = self.batches as f64;
        let stages = self
            .intra
            .iter()
            .zip(&self.inter)
            .map(|(a, e)| DistanceStats { intra: a / k, inter: e / k, degenerate: self.degenerate })
            .collect();
        Ok(EpochSeries { epoch, stages })
    }
}

/// Epoch means for stages `0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSeries {
    pub epoch: usize,
    pub stages: Vec<DistanceStats>,
}

/// One `epoch=.. stage=.. intra=.. inter=.. degenerate=..` line per stage
/// and epoch.
pub fn series_text(series: &[EpochSeries]) -> String {
    let mut s = String::new();
    for e in series {
        for (l, st) in e.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "epoch={} stage={l} intra={} inter={} degenerate={}",
                e.epoch, st.intra, st.inter, st.degenerate
            );
        }
    }
    s
}

/// Whether the intra-class spread of the last stage is below that of
/// stage 0 in `series`.
pub fn intra_tightens(series: &EpochSeries) -> Option<bool> {
    let (first, last) = (series.stages.first()?, series.stages.last()?);
    Some(last.intra < first.intra)
}
