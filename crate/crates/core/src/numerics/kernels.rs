//! Forward and adjoint kernels for the layer types the model uses.
//!
//! All maps are channel-major `C×H×W`; matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::math;

/// Geometry of a square-kernel convolution with symmetric zero padding
/// `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    #[inline]
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    /// Range of output columns whose tap `k` lands inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let pad = self.pad();
        let s = self.stride;
        // o·s + k − pad ≥ 0
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(s) };
        // o·s + k − pad ≤ len − 1
        let reach = len - 1 + pad;
        let hi = if k > reach { 0 } else { ((reach - k) / s + 1).min(out_len) };
        (lo, hi.max(lo))
    }
}

/// Adds `delta · ∂out/∂w[j]` to a convolution output in place, where `j`
/// is a flat weight index.
pub(crate) fn conv2d_weight_update(g: &ConvGeometry, x: &[f64], out: &mut [f64], j: usize, delta: f64) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s, pad) = (g.height, g.width, g.kernel, g.stride, g.pad());
    let kk = g.in_channels * k * k;
    let (o, col) = (j / kk, j % kk);
    let (c, ky, kx) = (col / (k * k), (col / k) % k, col % k);
    let (y_lo, y_hi) = g.valid(ky, h, oh);
    let (x_lo, x_hi) = g.valid(kx, wd, ow);
    let src = &x[c * h * wd..(c + 1) * h * wd];
    let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
    for oy in y_lo..y_hi {
        let row = &src[(oy * s + ky - pad) * wd..];
        for ox in x_lo..x_hi {
            dst[oy * ow + ox] += delta * row[ox * s + kx - pad];
        }
    }
}

/// Patch matrix `P×K` with `P = out_h·out_w` and `K = C·k·k`; taps that
/// fall into the padding are zero.
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s, pad) = (g.height, g.width, g.kernel, g.stride, g.pad());
    let kk = g.in_channels * k * k;
    let mut cols = vec![0.0; oh * ow * kk];
    for c in 0..g.in_channels {
        let src = &x[c * h * wd..(c + 1) * h * wd];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid(ky, h, oh);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid(kx, wd, ow);
                let col = (c * k + ky) * k + kx;
                for oy in y_lo..y_hi {
                    let row = &src[(oy * s + ky - pad) * wd..];
                    for ox in x_lo..x_hi {
                        cols[(oy * ow + ox) * kk + col] = row[ox * s + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k, s, pad) = (g.height, g.width, g.kernel, g.stride, g.pad());
    let kk = g.in_channels * k * k;
    let mut x = vec![0.0; g.in_channels * h * wd];
    for c in 0..g.in_channels {
        let dst = &mut x[c * h * wd..(c + 1) * h * wd];
        for ky in 0..k {
            let (y_lo, y_hi) = g.valid(ky, h, oh);
            for kx in 0..k {
                let (x_lo, x_hi) = g.valid(kx, wd, ow);
                let col = (c * k + ky) * k + kx;
                for oy in y_lo..y_hi {
                    let base = (oy * s + ky - pad) * wd;
                    for ox in x_lo..x_hi {
                        dst[base + ox * s + kx - pad] += cols[(oy * ow + ox) * kk + col];
                    }
                }
            }
        }
    }
    x
}

/// Dot product with four interleaved partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let p = g.out_height() * g.out_width();
    let kk = g.in_channels * g.kernel * g.kernel;
    let cols = im2col(g, x);
    let mut out = vec![0.0; g.out_channels * p];
    for o in 0..g.out_channels {
        let wr = &w[o * kk..(o + 1) * kk];
        for (i, v) in out[o * p..(o + 1) * p].iter_mut().enumerate() {
            *v = b[o] + dot(wr, &cols[i * kk..(i + 1) * kk]);
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_height() * g.out_width();
    let kk = g.in_channels * g.kernel * g.kernel;
    let cols = im2col(g, x);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    let mut gcols = vec![0.0; p * kk];
    for o in 0..g.out_channels {
        let gplane = &grad_out[o * p..(o + 1) * p];
        gb[o] = gplane.iter().sum();
        let wr = &w[o * kk..(o + 1) * kk];
        let gwr = &mut gw[o * kk..(o + 1) * kk];
        for (i, &gv) in gplane.iter().enumerate() {
            if gv != 0.0 {
                axpy(gv, &cols[i * kk..(i + 1) * kk], gwr);
                axpy(gv, wr, &mut gcols[i * kk..(i + 1) * kk]);
            }
        }
    }
    (col2im(g, &gcols), gw, gb)
}

/// Per-pixel linear map: `out[o, p] = Σ_c w[o, c] x[c, p] + b[o]`.
pub fn pixel_linear_forward(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * pixels];
    for o in 0..cout {
        out[o * pixels..(o + 1) * pixels].iter_mut().for_each(|v| *v = b[o]);
    }
    crate::numerics::tensor::matmul_into(w, x, &mut out, cout, cin, pixels);
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn pixel_linear_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    cin: usize,
    cout: usize,
    pixels: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; cin * pixels];
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let grow = &grad_out[o * pixels..(o + 1) * pixels];
        gb[o] = grow.iter().sum();
        for c in 0..cin {
            let xrow = &x[c * pixels..(c + 1) * pixels];
            gw[o * cin + c] = grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
            let wv = w[o * cin + c];
            if wv != 0.0 {
                for (gxv, &gv) in gx[c * pixels..(c + 1) * pixels].iter_mut().zip(grow) {
                    *gxv += wv * gv;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Row-wise affine map `out = x · wᵀ + b` for `x: m×k`, `w: n×k`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let wr = &w[j * k..(j + 1) * k];
            out[i * n + j] = b[j] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; m * k];
    let mut gw = vec![0.0; n * k];
    let mut gb = vec![0.0; n];
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let gv = grad_out[i * n + j];
            gb[j] += gv;
            let wr = &w[j * k..(j + 1) * k];
            for p in 0..k {
                gx[i * k + p] += gv * wr[p];
                gw[j * k + p] += gv * xr[p];
            }
        }
    }
    (gx, gw, gb)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out[n, c] = Σ_k weights[n, k] · cand[n, k·width + c]`.
pub fn mix_candidates_forward(cand: &[f64], weights: &[f64], rows: usize, r: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for n in 0..rows {
        let dst = &mut out[n * width..(n + 1) * width];
        for k in 0..r {
            let a = weights[n * r + k];
            let src = &cand[(n * r + k) * width..(n * r + k + 1) * width];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += a * v;
            }
        }
    }
    out
}

/// Returns `(grad_candidates, grad_weights)`.
pub fn mix_candidates_backward(
    cand: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    rows: usize,
    r: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gc = vec![0.0; cand.len()];
    let mut gw = vec![0.0; weights.len()];
    for n in 0..rows {
        let g = &grad_out[n * width..(n + 1) * width];
        for k in 0..r {
            let base = (n * r + k) * width;
            let a = weights[n * r + k];
            gw[n * r + k] = g.iter().zip(&cand[base..base + width]).map(|(x, y)| x * y).sum();
            for (gcv, &gv) in gc[base..base + width].iter_mut().zip(g) {
                *gcv = a * gv;
            }
        }
    }
    (gc, gw)
}
