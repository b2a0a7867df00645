//! Ablation runs: each variant applies `key = value` deltas to a shared
//! base configuration and is trained on the same data with the same seed.

use std::fmt::Write;

use dyndict_core::metrics::MetricReport;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::runner::{self, Splits, TrainOptions};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub table: String,
    pub name: String,
    pub deltas: Vec<(String, String)>,
}

impl Variant {
    pub fn new(table: &str, name: &str, deltas: &[(&str, &str)]) -> Self {
        Self {
            table: table.into(),
            name: name.into(),
            deltas: deltas.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        for (k, v) in &self.deltas {
            c.set(k, v).map_err(|m| dyndict_core::Error::Config(format!("variant {}: {m}", self.name)))?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Branch-loss combinations, interaction depths, component switches and
/// embedding widths.
pub fn standard_variants() -> Vec<Variant> {
    let mut v = vec![
        Variant::new("loss", "static", &[("lambda_static", "0.4"), ("lambda_dynamic", "0")]),
        Variant::new("loss", "dynamic", &[("lambda_static", "0"), ("lambda_dynamic", "1")]),
        Variant::new("loss", "static+dynamic w/o con", &[("use_contrastive", "false")]),
        Variant::new("loss", "static+dynamic w/ con", &[("use_contrastive", "true")]),
    ];
    for l in 1..=4 {
        v.push(Variant::new("stages", &format!("L={l}"), &[("stages", &l.to_string())]));
    }
    for (name, m, a, i) in [
        ("no modulator", "false", "true", "true"),
        ("no aggregator", "true", "false", "true"),
        ("no interaction", "true", "true", "false"),
        ("full", "true", "true", "true"),
    ] {
        v.push(Variant::new(
            "components",
            name,
            &[("use_modulator", m), ("use_aggregator", a), ("use_interaction", i)],
        ));
    }
    for w in [64, 128, 256, 512] {
        v.push(Variant::new("width", &format!("C'={w}"), &[("embed_dim", &w.to_string())]));
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Every key of the effective configuration.
    pub config: Vec<(&'static str, String)>,
    pub best_epoch: usize,
    pub val: MetricReport,
}

pub fn run(base: &RunConfig, variants: &[Variant], splits: &Splits, progress: bool) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Core(dyndict_core::Error::Config("no ablation variants given".into())));
    }
    variants
        .iter()
        .map(|v| {
            let config = v.apply(base)?;
            if progress {
                eprintln!("ablation {} / {}", v.table, v.name);
            }
            let outcome = runner::train(&config, splits, &TrainOptions { out: None, progress })?;
            Ok(AblationRow {
                variant: v.clone(),
                config: config.entries(),
                best_epoch: outcome.best_epoch,
                val: outcome.best().val.clone(),
            })
        })
        .collect()
}

/// Aligned comparison table, one line per row; per-class IoU columns
/// follow the summary metrics.
pub fn table(rows: &[AblationRow]) -> String {
    let n = rows.iter().map(|r| r.val.per_class.len()).max().unwrap_or(0);
    let name_w = rows.iter().map(|r| r.variant.name.len()).max().unwrap_or(0).max("variant".len());
    let mut s = String::new();
    let _ = write!(s, "{:<10} {:<name_w$} {:>5} {:>7} {:>7} {:>7}", "table", "variant", "best", "OA", "mIoU", "mF1");
    for c in 0..n {
        let _ = write!(s, " {:>7}", format!("IoU{c}"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{:<10} {:<name_w$} {:>5} {:>7.4} {:>7.4} {:>7.4}",
            r.variant.table, r.variant.name, r.best_epoch, r.val.oa, r.val.miou, r.val.mf1
        );
        for c in 0..n {
            match r.val.per_class.get(c).copied().flatten() {
                Some(sc) => {
                    let _ = write!(s, " {:>7.4}", sc.iou);
                }
                None => {
                    let _ = write!(s, " {:>7}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

/// The deltas of each row followed by its full effective configuration.
pub fn config_echo(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let deltas: Vec<String> = r.variant.deltas.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "[{} / {}] {}", r.variant.table, r.variant.name, deltas.join(" "));
        for (k, v) in &r.config {
            let _ = writeln!(s, "  {k} = {v}");
        }
    }
    s
}
