//! Blob-world benchmark with controllable difficulty.
//!
//! Classes come in texture twins `(2k, 2k+1)`: both share a hue, the even
//! one is smooth and the odd one is grainy. Homogeneity pulls every mean
//! colour toward neutral grey (and removes the twins' brightness split),
//! heterogeneity scales the per-pixel texture noise.

use alloc::format;
use alloc::vec::Vec;

use super::{quantize, LabelMap, LabeledSample, IGNORE_LABEL};
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Number of distinct class templates.
pub const MAX_CLASSES: usize = 8;

const PAIR_COLORS: [[f64; 3]; 4] = [[0.55, 0.55, 0.55], [0.80, 0.20, 0.20], [0.20, 0.70, 0.25], [0.20, 0.30, 0.85]];
const NEUTRAL: f64 = 0.5;
/// Brightness offset separating twins at zero homogeneity.
const TWIN_SPLIT: f64 = 0.15;
/// Noise amplitude of smooth (even) and grainy (odd) classes.
const TEXTURE: [f64; 2] = [0.1, 0.3];
const MAX_LAYOUT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub heterogeneity: f64,
    pub homogeneity: f64,
    /// Width of a border labelled [`IGNORE_LABEL`].
    pub ignore_border: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_classes: 4,
            train: 200,
            val: 40,
            test: 40,
            seed: 0,
            heterogeneity: 0.5,
            homogeneity: 0.5,
            ignore_border: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if self.n_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "n_classes = {} exceeds the {MAX_CLASSES} available class templates",
                self.n_classes
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::Config(format!("image_size must be a positive multiple of 16, got {}", self.image_size)));
        }
        for (name, v) in [("heterogeneity", self.heterogeneity), ("homogeneity", self.homogeneity)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if 2 * self.ignore_border >= self.image_size {
            return Err(Error::Config(format!("ignore_border {} leaves no labelled pixels", self.ignore_border)));
        }
        Ok(())
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Noise-free colour of class `c`.
    pub fn class_mean(&self, c: usize) -> [f64; 3] {
        let base = PAIR_COLORS[c / 2];
        let twin = if c.is_multiple_of(2) { -TWIN_SPLIT } else { TWIN_SPLIT };
        let keep = 1.0 - self.homogeneity;
        base.map(|v| NEUTRAL + keep * (v + twin - NEUTRAL))
    }

    pub fn class_noise(&self, c: usize) -> f64 {
        self.heterogeneity * TEXTURE[c % 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let make = |split: Split| -> Result<Vec<LabeledSample>> {
        (0..config.split_len(split)).map(|i| generate_sample(config, split, i)).collect()
    };
    Ok(SyntheticDataset { config: config.clone(), train: make(Split::Train)?, val: make(Split::Val)?, test: make(Split::Test)? })
}

/// One sample, reproducible on its own from `(seed, split, index)`.
/// Every class is present in every sample.
pub fn generate_sample(config: &SyntheticConfig, split: Split, index: usize) -> Result<LabeledSample> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).substream((split.stream() << 32) | index as u64);
    let s = config.image_size;
    let n = config.n_classes;
    let mut label = LabelMap::filled(s, s, 0);
    let mut attempts = 0;
    loop {
        attempts += 1;
        if attempts > MAX_LAYOUT_ATTEMPTS {
            return Err(Error::Config(format!("could not place all {n} classes on a {s}x{s} canvas")));
        }
        label.data_mut().fill(0);
        let mut order: Vec<usize> = (1..n).collect();
        let extras = rng.below(3);
        for _ in 0..extras {
            order.push(1 + rng.below(n - 1));
        }
        rng.shuffle(&mut order);
        for &c in &order {
            stamp_blob(&mut label, &mut rng, c as u8);
        }
        if label.histogram(n).iter().all(|&h| h > 0) {
            break;
        }
    }

    let p = s * s;
    let mut data = alloc::vec![0.0; 3 * p];
    for i in 0..p {
        let c = label.data()[i] as usize;
        let mean = config.class_mean(c);
        let noise = config.class_noise(c) * rng.normal();
        for ch in 0..3 {
            data[ch * p + i] = quantize(mean[ch] + noise) as f64 / 255.0;
        }
    }
    let b = config.ignore_border;
    if b > 0 {
        for y in 0..s {
            for x in 0..s {
                if y < b || x < b || y >= s - b || x >= s - b {
                    label.set(y, x, IGNORE_LABEL);
                }
            }
        }
    }
    LabeledSample::new(Tensor::new(alloc::vec![3, s, s], data)?, label)
}

/// Filled ellipse with semi-axes in `[S/8, S/4]`.
fn stamp_blob(label: &mut LabelMap, rng: &mut Rng, class: u8) {
    let s = label.height();
    let lo = (s / 8).max(1);
    let hi = (s / 4).max(lo);
    let ry = (lo + rng.below(hi - lo + 1)) as f64;
    let rx = (lo + rng.below(hi - lo + 1)) as f64;
    let cy = rng.below(s) as f64;
    let cx = rng.below(s) as f64;
    for y in 0..s {
        for x in 0..s {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                label.set(y, x, class);
            }
        }
    }
}
