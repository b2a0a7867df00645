use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};
use crate::numerics::{kernels, math};

/// Dense row-major array of `f64` values.
///
/// The empty shape denotes a scalar holding exactly one value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", alloc::format!("zero extent in shape {}", fmt_shape(&shape))));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                alloc::format!("shape {} holds {numel} values, got {}", fmt_shape(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                alloc::format!("cannot view {} as {}", fmt_shape(&self.shape), fmt_shape(shape)),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(op, alloc::format!("expected a matrix, got {}", fmt_shape(&self.shape)))),
        }
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(
                op,
                alloc::format!("expected a C×H×W map, got {}", fmt_shape(&self.shape)),
            )),
        }
    }
}

/// Matrix product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shapes("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` on raw row-major buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shapes("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        out.extend(b.data.chunks(k).map(|br| kernels::dot(ar, br)));
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2("softmax_rows")?;
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape.clone(), out)
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_cols(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2("softmax_cols")?;
    let mut max = vec![f64::NEG_INFINITY; n];
    for row in x.data.chunks(n) {
        for (mx, &v) in max.iter_mut().zip(row) {
            *mx = mx.max(v);
        }
    }
    let mut out = Vec::with_capacity(m * n);
    let mut total = vec![0.0; n];
    for row in x.data.chunks(n) {
        for ((&v, mx), t) in row.iter().zip(&max).zip(total.iter_mut()) {
            let e = math::exp(v - mx);
            *t += e;
            out.push(e);
        }
    }
    for row in out.chunks_mut(n) {
        for (v, t) in row.iter_mut().zip(&total) {
            *v /= t;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// One axis of a corner-aligned bilinear resampling: for each output
/// coordinate, the two source taps and the weight of the upper one.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Taps {
    /// Source coordinate of output `i` is `i · (len_in − 1) / (len_out − 1)`,
    /// so the first and last samples coincide with the source endpoints.
    pub fn corner_aligned(len_in: usize, len_out: usize) -> Self {
        let mut lo = Vec::with_capacity(len_out);
        let mut hi = Vec::with_capacity(len_out);
        let mut frac = Vec::with_capacity(len_out);
        for i in 0..len_out {
            let src = if len_out > 1 {
                (i * (len_in - 1)) as f64 / (len_out - 1) as f64
            } else {
                0.0
            };
            let l = (math::floor(src) as usize).min(len_in - 1);
            let h = (l + 1).min(len_in - 1);
            lo.push(l);
            hi.push(h);
            frac.push(src - l as f64);
        }
        Self { lo, hi, frac }
    }

    /// Linear resampling of one source line onto `out`.
    fn resample(&self, line: &[f64], out: &mut [f64]) {
        for (((o, &l), &h), &f) in out.iter_mut().zip(&self.lo).zip(&self.hi).zip(&self.frac) {
            *o = (1.0 - f) * line[l] + f * line[h];
        }
    }
}

/// Bilinear resize of a `C×h×w` map with corner-aligned sampling.
pub fn interpolate_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3("interpolate_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(
            "interpolate_bilinear",
            alloc::format!("target size {out_h}x{out_w} must be positive"),
        ));
    }
    let ty = Taps::corner_aligned(h, out_h);
    let tx = Taps::corner_aligned(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    let mut top = vec![0.0; out_w];
    let mut bottom = vec![0.0; out_w];
    for (src, dst) in x.data.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, row) in dst.chunks_mut(out_w).enumerate() {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            tx.resample(&src[y0 * w..(y0 + 1) * w], &mut top);
            tx.resample(&src[y1 * w..(y1 + 1) * w], &mut bottom);
            for ((o, &t), &b) in row.iter_mut().zip(&top).zip(&bottom) {
                *o = (1.0 - fy) * t + fy * b;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`interpolate_bilinear`]: scatters an output gradient back
/// onto the `h×w` source grid.
pub(crate) fn interpolate_bilinear_backward(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, out_h, out_w) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let ty = Taps::corner_aligned(h, out_h);
    let tx = Taps::corner_aligned(w, out_w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &grad.data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * out_w + ox];
                let top = (1.0 - fy) * v;
                let bottom = fy * v;
                dst[y0 * w + x0] += (1.0 - fx) * top;
                dst[y0 * w + x1] += fx * top;
                dst[y1 * w + x0] += (1.0 - fx) * bottom;
                dst[y1 * w + x1] += fx * bottom;
            }
        }
    }
    Tensor {
        shape: vec![c, h, w],
        data: out,
    }
}
