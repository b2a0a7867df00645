//! Label maps, samples, the synthetic benchmark and prediction colouring.

mod synth;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::Tensor;
use crate::{Error, Result};

pub use synth::{generate, generate_sample, Split, SyntheticConfig, SyntheticDataset, MAX_CLASSES};

/// Reserved label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Row-major `H×W` map of class indices (or [`IGNORE_LABEL`]).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("label map must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails on the first pixel whose label is neither a class below
    /// `n_classes` nor `ignore`.
    pub fn validate(&self, n_classes: usize, ignore: u8) -> Result<()> {
        match self.data.iter().position(|&v| v != ignore && v as usize >= n_classes) {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel (y={}, x={}) is outside 0..{n_classes} and is not the ignore label {ignore}",
                self.data[i],
                i / self.width,
                i % self.width
            ))),
        }
    }

    /// Per-class pixel counts, ignoring labels `>= n_classes`.
    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &v in &self.data {
            if (v as usize) < n_classes {
                h[v as usize] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
}

impl LabeledSample {
    pub fn new(image: Tensor, label: LabelMap) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != label.height() || shape[2] != label.width() {
            return Err(Error::Data(format!(
                "image of shape {shape:?} does not match a {}x{} label map",
                label.height(),
                label.width()
            )));
        }
        Ok(Self { image, label })
    }
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Converts to a `3×H×W` tensor scaled by `1/255`.
    pub fn to_tensor(&self) -> Tensor {
        let p = self.height * self.width;
        let mut out = vec![0.0; 3 * p];
        for i in 0..p {
            for c in 0..3 {
                out[c * p + i] = self.data[3 * i + c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("shape matches data")
    }

    /// Quantizes a `3×H×W` tensor to 8 bits with `round(255·v)` after
    /// clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3("rgb image")?;
        if c != 3 {
            return Err(Error::Data(format!("expected 3 channels, got {c}")));
        }
        let p = h * w;
        let mut data = vec![0u8; 3 * p];
        for i in 0..p {
            for ch in 0..3 {
                data[3 * i + ch] = quantize(t.data()[ch * p + i]);
            }
        }
        Ok(Self { height: h, width: w, data })
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    crate::numerics::math::round(v * 255.0) as u8
}

/// Distinct colours for up to eight classes; twins share a hue.
pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [128, 128, 128],
    [230, 230, 230],
    [200, 40, 40],
    [255, 150, 150],
    [30, 130, 30],
    [140, 230, 110],
    [40, 60, 200],
    [140, 180, 255],
];

/// Looks every pixel up in `palette`; ignored pixels are black.
pub fn colorize(map: &LabelMap, palette: &[[u8; 3]], ignore: u8) -> Result<RgbImage> {
    let mut data = Vec::with_capacity(3 * map.len());
    for (i, &v) in map.data().iter().enumerate() {
        if v == ignore {
            data.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let rgb = palette.get(v as usize).ok_or_else(|| {
            Error::Data(format!(
                "class {v} at pixel (y={}, x={}) has no palette entry ({} colours)",
                i / map.width(),
                i % map.width(),
                palette.len()
            ))
        })?;
        data.extend_from_slice(rgb);
    }
    Ok(RgbImage { height: map.height(), width: map.width(), data })
}
