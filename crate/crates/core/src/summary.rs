//! Parameter and multiply-accumulate counts of the assembled network.

use alloc::format;

use crate::encoder::{PYRAMID_LEVELS, SPATIAL_DIVISOR};
use crate::model::{Model, ModelConfig};
use crate::numerics::ParamStore;
use crate::{Error, Result};

const KERNEL_TAPS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSummary {
    /// Trainable scalars in the store.
    pub params: usize,
    /// Multiply-accumulates of one inference forward (dynamic branch only).
    pub macs: usize,
}

/// Exact scalar count every parameter registered by [`Model::new`] adds up
/// to, derived from the configuration alone.
pub fn param_count(config: &ModelConfig) -> usize {
    let enc = config.encoder();
    let cp = config.embed_dim;
    let (n, r) = (config.n_classes, config.reduction);
    let linear = |cin: usize, cout: usize| cin * cout + cout;
    let mut total = 0;
    let mut cin = 3;
    for level in 1..=PYRAMID_LEVELS {
        let c = enc.level_channels(level);
        total += KERNEL_TAPS * cin * c + c;
        total += KERNEL_TAPS * c * c + c;
        total += linear(c, cp);
        cin = c;
    }
    total += linear(PYRAMID_LEVELS * cp, cp);
    total += n * cp;
    let deep = enc.level_channels(PYRAMID_LEVELS);
    total += linear(cp, r * cp) + 2 * linear(deep / 2, deep / 2) + linear(deep, n * r);
    total + linear(cp, cp)
}

/// Analytic multiply-accumulate count of one inference forward on an
/// `height × width` image. Convolutions, linear maps and attention products
/// count one per multiply-add; pooling and softmax count one per element.
/// Activations, resampling and bias additions are not counted.
pub fn forward_macs(config: &ModelConfig, height: usize, width: usize) -> Result<usize> {
    if height == 0 || width == 0 || !height.is_multiple_of(SPATIAL_DIVISOR) || !width.is_multiple_of(SPATIAL_DIVISOR) {
        return Err(Error::Config(format!(
            "summary input {height}x{width} must be divisible by {SPATIAL_DIVISOR}"
        )));
    }
    let enc = config.encoder();
    let cp = config.embed_dim;
    let (n, r) = (config.n_classes, config.reduction);
    let pixels = |level: usize| (height >> level) * (width >> level);
    let mut macs = 0;
    let mut cin = 3;
    for level in 1..=PYRAMID_LEVELS {
        let c = enc.level_channels(level);
        macs += pixels(level) * KERNEL_TAPS * c * (cin + c);
        cin = c;
    }
    if config.use_aggregator {
        for level in 1..=PYRAMID_LEVELS {
            macs += pixels(level) * enc.level_channels(level) * cp;
        }
        macs += pixels(1) * PYRAMID_LEVELS * cp * cp;
    } else {
        macs += pixels(1) * enc.level_channels(1) * cp;
    }
    if config.use_modulator {
        let deep = enc.level_channels(PYRAMID_LEVELS);
        let half = deep / 2;
        macs += deep * pixels(PYRAMID_LEVELS);
        macs += 2 * half * half + deep * n * r + n * r;
        macs += n * cp * r * cp + n * r * cp;
    }
    let p = pixels(1);
    macs += config.decoder().effective_stages() * (4 * n * p * cp + 2 * n * p);
    macs += cp * cp + n * cp * p;
    Ok(macs)
}

/// Counts for an assembled model; the parameter count is read from the
/// store, so it covers exactly what was registered.
pub fn model_summary(model: &Model, store: &ParamStore, height: usize, width: usize) -> Result<ModelSummary> {
    Ok(ModelSummary { params: store.scalar_count(), macs: forward_macs(model.config(), height, width)? })
}
