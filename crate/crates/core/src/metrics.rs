//! Confusion-matrix metrics: OA, per-class IoU and F1, mIoU and mF1.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::data::LabelMap;
use crate::{Error, Result};

/// `counts[gt][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n: n_classes, counts: vec![0; n_classes * n_classes] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Data("confusion matrix must be square".into()));
        }
        Ok(Self { n, counts: rows.concat() })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.n).map(|r| self.get(r, c)).sum::<u64>() - self.get(c, c)
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.n).map(|k| self.get(c, k)).sum::<u64>() - self.get(c, c)
    }

    /// Counts every pixel whose label is not `ignore`.
    pub fn accumulate(&mut self, pred: &LabelMap, label: &LabelMap, ignore: u8) -> Result<()> {
        if pred.height() != label.height() || pred.width() != label.width() {
            return Err(Error::Data(format!(
                "prediction {}x{} does not match label {}x{}",
                pred.height(),
                pred.width(),
                label.height(),
                label.width()
            )));
        }
        label.validate(self.n, ignore)?;
        if let Some(i) = pred.data().iter().position(|&p| p as usize >= self.n) {
            return Err(Error::Data(format!(
                "predicted class {} at pixel (y={}, x={}) is outside 0..{}",
                pred.data()[i],
                i / pred.width(),
                i % pred.width(),
                self.n
            )));
        }
        for (&p, &g) in pred.data().iter().zip(label.data()) {
            if g != ignore {
                self.counts[g as usize * self.n + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Data(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("overall accuracy of an empty confusion matrix".into()));
        }
        let diag: u64 = (0..self.n).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }

    pub fn class_scores(&self, c: usize) -> Option<ClassScores> {
        let tp = self.true_positives(c) as f64;
        let fp = self.false_positives(c) as f64;
        let fn_ = self.false_negatives(c) as f64;
        if tp + fp + fn_ == 0.0 {
            return None;
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Some(ClassScores { iou: tp / (tp + fp + fn_), f1, precision, recall })
    }

    pub fn report(&self) -> Result<MetricReport> {
        let oa = self.overall_accuracy()?;
        let per_class: Vec<Option<ClassScores>> = (0..self.n).map(|c| self.class_scores(c)).collect();
        let included: Vec<&ClassScores> = per_class.iter().flatten().collect();
        if included.is_empty() {
            return Err(Error::UndefinedMetric("no class has any ground truth or prediction".into()));
        }
        let k = included.len() as f64;
        let miou = included.iter().map(|s| s.iou).sum::<f64>() / k;
        let mf1 = included.iter().map(|s| s.f1).sum::<f64>() / k;
        Ok(MetricReport { oa, miou, mf1, per_class })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub oa: f64,
    pub miou: f64,
    pub mf1: f64,
    /// `None` for classes with neither ground truth nor predictions; they
    /// are left out of the means.
    pub per_class: Vec<Option<ClassScores>>,
}

impl MetricReport {
    /// Column-aligned table, one row per class plus a summary row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {:>8}", "class", "IoU", "F1");
        for (c, sc) in self.per_class.iter().enumerate() {
            match sc {
                Some(sc) => {
                    let _ = writeln!(s, "{:<8} {:>8.4} {:>8.4}", c, sc.iou, sc.f1);
                }
                None => {
                    let _ = writeln!(s, "{:<8} {:>8} {:>8}", c, "-", "-");
                }
            }
        }
        let _ = writeln!(s, "{:<8} {:>8.4} {:>8.4}", "mean", self.miou, self.mf1);
        let _ = writeln!(s, "OA {:.4}", self.oa);
        s
    }

    /// `metric=value` lines with four decimals.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "oa={:.4}", self.oa);
        let _ = writeln!(s, "miou={:.4}", self.miou);
        let _ = writeln!(s, "mf1={:.4}", self.mf1);
        for (c, sc) in self.per_class.iter().enumerate() {
            if let Some(sc) = sc {
                let _ = writeln!(s, "iou_{c}={:.4}", sc.iou);
                let _ = writeln!(s, "f1_{c}={:.4}", sc.f1);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn accumulate_perfect_and_ignored() {
        let lb = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&lb, &lb, 255).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(cm.get(r, c) > 0, r == c);
            }
        }
        let before = cm.clone();
        cm.accumulate(&lb, &LabelMap::filled(2, 2, 255), 255).unwrap();
        assert_eq!(cm, before);
        assert!(cm.accumulate(&LabelMap::filled(2, 2, 3), &lb, 255).is_err());
    }

    #[test]
    fn arithmetic_examples() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 1], vec![1, 3]]).unwrap();
        assert_eq!(cm.overall_accuracy().unwrap(), 0.75);
        let cm = ConfusionMatrix::from_counts(&[vec![50, 25], vec![25, 0]]).unwrap();
        let s = cm.class_scores(0).unwrap();
        assert_eq!(s.iou, 0.5);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let cm = ConfusionMatrix::from_counts(&[vec![4, 0], vec![0, 7]]).unwrap();
        let r = cm.report().unwrap();
        assert_eq!((r.oa, r.miou, r.mf1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_inputs_are_undefined() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.overall_accuracy(), Err(Error::UndefinedMetric(_))));
        assert!(matches!(cm.report(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn empty_classes_leave_the_means() {
        let cm = ConfusionMatrix::from_counts(&[vec![2, 0, 0], vec![0, 0, 0], vec![0, 0, 2]]).unwrap();
        let r = cm.report().unwrap();
        assert!(r.per_class[1].is_none());
        assert_eq!(r.miou, 1.0);
    }

    fn counting_oracle(n: usize, preds: &[LabelMap], labels: &[LabelMap]) -> Vec<Vec<u64>> {
        let mut m = vec![vec![0u64; n]; n];
        for (p, l) in preds.iter().zip(labels) {
            for y in 0..l.height() {
                for x in 0..l.width() {
                    if l.get(y, x) != 255 {
                        m[l.get(y, x) as usize][p.get(y, x) as usize] += 1;
                    }
                }
            }
        }
        m
    }

    fn random_map(rng: &mut Rng, n: usize, ignore: bool) -> LabelMap {
        let data = (0..64).map(|_| if ignore && rng.below(8) == 0 { 255 } else { rng.below(n) as u8 }).collect();
        LabelMap::new(8, 8, data).unwrap()
    }

    #[test]
    fn matches_counting_oracle_and_is_order_free() {
        let mut rng = Rng::new(4);
        let preds: Vec<_> = (0..6).map(|_| random_map(&mut rng, 5, false)).collect();
        let labels: Vec<_> = (0..6).map(|_| random_map(&mut rng, 5, true)).collect();
        let mut cm = ConfusionMatrix::new(5);
        for (p, l) in preds.iter().zip(&labels) {
            cm.accumulate(p, l, 255).unwrap();
        }
        assert_eq!(cm, ConfusionMatrix::from_counts(&counting_oracle(5, &preds, &labels)).unwrap());
        let mut order: Vec<usize> = (0..6).collect();
        rng.shuffle(&mut order);
        let mut shuffled = ConfusionMatrix::new(5);
        for &i in &order {
            shuffled.accumulate(&preds[i], &labels[i], 255).unwrap();
        }
        assert_eq!(cm, shuffled);
    }

    #[test]
    fn report_formats() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 1], vec![1, 3]]).unwrap();
        let r = cm.report().unwrap();
        assert!(r.key_values().starts_with("oa=0.7500\nmiou=0.6000\nmf1=0.7500\n"));
        assert!(r.table().contains("mean"));
    }

    proptest! {
        #[test]
        fn f1_iou_identity(cells in proptest::collection::vec(0u64..50, 25)) {
            let rows: Vec<Vec<u64>> = cells.chunks(5).map(|c| c.to_vec()).collect();
            let cm = ConfusionMatrix::from_counts(&rows).unwrap();
            if cm.total() == 0 {
                return Ok(());
            }
            let r = cm.report().unwrap();
            prop_assert!((0.0..=1.0).contains(&r.oa));
            for s in r.per_class.iter().flatten() {
                prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
                prop_assert!(s.iou <= s.f1 + 1e-15);
                prop_assert!((0.0..=1.0).contains(&s.iou) && (0.0..=1.0).contains(&s.f1));
            }
        }
    }
}
