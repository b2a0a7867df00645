//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys are
//! errors. Keys left out keep their defaults; [`KEYS`] lists every key in
//! the order [`RunConfig::to_text`] writes them.

use std::path::{Path, PathBuf};

use dyndict_core::data::SyntheticConfig;
use dyndict_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::fsutil;

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("n_classes", "number of classes N (model and synthetic data)"),
    ("base_channels", "encoder width C; level i has C·2^i channels"),
    ("embed_dim", "embedding width C′ of the dictionaries and the fused map"),
    ("stages", "interaction stages L"),
    ("reduction", "modulator candidates per class r"),
    ("residual", "add the previous D and E after each interaction stage"),
    ("use_modulator", "condition the static dictionary on the image"),
    ("use_aggregator", "fuse all four pyramid levels (false: level 1 only)"),
    ("use_interaction", "run the interaction stages (false: D_0, E_0 go straight to the head)"),
    ("lambda_static", "weight of the static-branch loss"),
    ("lambda_dynamic", "weight of the dynamic-branch loss"),
    ("use_contrastive", "add the dictionary contrastive term to the dynamic loss"),
    ("epsilon", "stabiliser of the contrastive quotient"),
    ("ce_weight", "weight of cross-entropy within a branch"),
    ("dice_weight", "weight of Dice within a branch"),
    ("ignore_label", "label value excluded from losses and metrics"),
    ("lr", "peak learning rate, annealed to 0 by a cosine schedule"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "denominator stabiliser of the optimizer"),
    ("batch_size", "samples per step; partial batches are dropped"),
    ("epochs", "passes over the training split"),
    ("seed", "run seed for initialization and shuffling"),
    ("image_size", "synthetic image side, a multiple of 16"),
    ("train_samples", "synthetic training images"),
    ("val_samples", "synthetic validation images"),
    ("test_samples", "synthetic test images"),
    ("data_seed", "seed of the synthetic generator"),
    ("heterogeneity", "within-class texture noise in [0, 1]"),
    ("homogeneity", "cross-class colour similarity in [0, 1]"),
    ("ignore_border", "width of an ignore-labelled border in synthetic labels"),
    ("data_dir", "dataset root (empty: generate in memory)"),
    ("out_dir", "output directory (empty: none)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SyntheticConfig { n_classes: train.model.n_classes, ..SyntheticConfig::default() };
        Self { train, synth, data_dir: None, out_dir: None }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as a {}", std::any::type_name::<T>()))
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// The configuration used by end-to-end gradient checks: N = 3, C′ = 8,
    /// L = 2, B = 2 on 32×32 inputs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.train.model = dyndict_core::model::ModelConfig::tiny();
        c.train.batch_size = 2;
        c.synth.n_classes = c.train.model.n_classes;
        c.synth.image_size = 32;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "n_classes" => {
                t.model.n_classes = parse_num(value)?;
                s.n_classes = t.model.n_classes;
            }
            "base_channels" => t.model.base_channels = parse_num(value)?,
            "embed_dim" => t.model.embed_dim = parse_num(value)?,
            "stages" => t.model.stages = parse_num(value)?,
            "reduction" => t.model.reduction = parse_num(value)?,
            "residual" => t.model.residual = parse_bool(value)?,
            "use_modulator" => t.model.use_modulator = parse_bool(value)?,
            "use_aggregator" => t.model.use_aggregator = parse_bool(value)?,
            "use_interaction" => t.model.use_interaction = parse_bool(value)?,
            "lambda_static" => t.loss.lambda_static = parse_num(value)?,
            "lambda_dynamic" => t.loss.lambda_dynamic = parse_num(value)?,
            "use_contrastive" => t.loss.use_contrastive = parse_bool(value)?,
            "epsilon" => t.loss.epsilon = parse_num(value)?,
            "ce_weight" => t.loss.ce_weight = parse_num(value)?,
            "dice_weight" => t.loss.dice_weight = parse_num(value)?,
            "ignore_label" => t.loss.ignore_label = parse_num(value)?,
            "lr" => t.lr = parse_num(value)?,
            "weight_decay" => t.optimizer.weight_decay = parse_num(value)?,
            "beta1" => t.optimizer.beta1 = parse_num(value)?,
            "beta2" => t.optimizer.beta2 = parse_num(value)?,
            "adam_eps" => t.optimizer.eps = parse_num(value)?,
            "batch_size" => t.batch_size = parse_num(value)?,
            "epochs" => t.epochs = parse_num(value)?,
            "seed" => t.seed = parse_num(value)?,
            "image_size" => s.image_size = parse_num(value)?,
            "train_samples" => s.train = parse_num(value)?,
            "val_samples" => s.val = parse_num(value)?,
            "test_samples" => s.test = parse_num(value)?,
            "data_seed" => s.seed = parse_num(value)?,
            "heterogeneity" => s.heterogeneity = parse_num(value)?,
            "homogeneity" => s.homogeneity = parse_num(value)?,
            "ignore_border" => s.ignore_border = parse_num(value)?,
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let s = &self.synth;
        let m = &t.model;
        let values = [
            m.n_classes.to_string(),
            m.base_channels.to_string(),
            m.embed_dim.to_string(),
            m.stages.to_string(),
            m.reduction.to_string(),
            m.residual.to_string(),
            m.use_modulator.to_string(),
            m.use_aggregator.to_string(),
            m.use_interaction.to_string(),
            t.loss.lambda_static.to_string(),
            t.loss.lambda_dynamic.to_string(),
            t.loss.use_contrastive.to_string(),
            t.loss.epsilon.to_string(),
            t.loss.ce_weight.to_string(),
            t.loss.dice_weight.to_string(),
            t.loss.ignore_label.to_string(),
            t.lr.to_string(),
            t.optimizer.weight_decay.to_string(),
            t.optimizer.beta1.to_string(),
            t.optimizer.beta2.to_string(),
            t.optimizer.eps.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            s.image_size.to_string(),
            s.train.to_string(),
            s.val.to_string(),
            s.test.to_string(),
            s.seed.to_string(),
            s.heterogeneity.to_string(),
            s.homogeneity.to_string(),
            s.ignore_border.to_string(),
            path_value(&self.data_dir),
            path_value(&self.out_dir),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies the assignments in `text` on top of the defaults. `origin`
    /// names the source in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut config = Self::default();
        config.apply(text, origin)?;
        Ok(config)
    }

    pub fn apply(&mut self, text: &str, origin: &Path) -> Result<()> {
        let err = |line: usize, message: String| Error::ConfigFile { path: origin.to_path_buf(), line, message };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim()).map_err(|m| err(i + 1, m))?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsutil::read_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.synth.n_classes != self.train.model.n_classes {
            return Err(dyndict_core::Error::Config(format!(
                "synthetic data has {} classes, the model {}",
                self.synth.n_classes, self.train.model.n_classes
            ))
            .into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::exit;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.train.lr = 3.25e-4;
        c.train.model.residual = true;
        c.synth.homogeneity = 0.1;
        c.out_dir = Some(PathBuf::from("runs/a"));
        let back = RunConfig::parse(&c.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse("", Path::new("x")).unwrap(), RunConfig::default());
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn comments_and_spacing() {
        let c = RunConfig::parse("# run\n\n  epochs=2\nseed =  7 \n", Path::new("x")).unwrap();
        assert_eq!((c.train.epochs, c.train.seed), (2, 7));
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [("epochs = 2\nbogus = 1\n", 2), ("lr = fast\n", 1), ("residual\n", 1)] {
            match RunConfig::parse(text, Path::new("cfg")) {
                Err(e @ Error::ConfigFile { .. }) => {
                    assert!(e.to_string().starts_with(&format!("cfg:{line}:")), "{e}");
                    assert_eq!(e.exit_code(), exit::CONFIG);
                }
                other => panic!("{other:?}"),
            }
        }
        let e = RunConfig::parse("batch_size = 0\n", Path::new("cfg")).unwrap_err();
        assert_eq!(e.exit_code(), exit::CONFIG);
    }
}
