//! Dynamic-branch evaluation over a split.

use alloc::vec::Vec;

use crate::data::{LabelMap, LabeledSample};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::Model;
use crate::numerics::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricReport,
    /// Filled only when predictions were requested.
    pub predictions: Vec<LabelMap>,
}

/// Predicts every sample with the dynamic branch alone and scores the
/// predictions against the labels.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    samples: &[LabeledSample],
    ignore: u8,
    keep_predictions: bool,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let mut confusion = ConfusionMatrix::new(model.config().n_classes);
    let mut predictions = Vec::new();
    for s in samples {
        let pred = model.predict(store, &s.image)?;
        confusion.accumulate(&pred, &s.label, ignore)?;
        if keep_predictions {
            predictions.push(pred);
        }
    }
    let report = confusion.report()?;
    Ok(Evaluation { confusion, report, predictions })
}

/// Scores given predictions; with the labels themselves as predictions
/// this is the oracle path.
pub fn evaluate_maps(predictions: &[LabelMap], labels: &[&LabelMap], n_classes: usize, ignore: u8) -> Result<Evaluation> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Contract(alloc::format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(n_classes);
    for (p, l) in predictions.iter().zip(labels) {
        confusion.accumulate(p, l, ignore)?;
    }
    let report = confusion.report()?;
    Ok(Evaluation { confusion, report, predictions: predictions.to_vec() })
}
