//! Parameterised building blocks shared by the encoder, modulator and head.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{math, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::Result;

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Square-kernel convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let std = math::sqrt(2.0 / (cin * kernel * kernel) as f64);
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[cout, cin, kernel, kernel], std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride)
    }
}

/// Affine map `y = W x + b` with `W: out×in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in)`, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let std = math::sqrt(1.0 / cin as f64);
        let weight = store.add(format!("{name}.weight"), normal_tensor(rng, &[cout, cin], std))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias })
    }

    /// Applies the map to each row of an `m×in` matrix (or to a vector).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }

    /// Applies the map to every pixel of a `C×H×W` map.
    pub fn forward_pixels(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.pixel_linear(x, w, b)
    }

    pub fn in_features(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[1]
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

pub(crate) fn normal_init(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    normal_tensor(rng, shape, std)
}
