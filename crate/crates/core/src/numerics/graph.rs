//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every op evaluates eagerly and records just enough to run its adjoint,
//! so the forward values are always available for inspection.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{fmt_shape, Error, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::tensor::{self, interpolate_bilinear_backward};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Node handle on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Re-evaluates a custom scalar from the current values of its inputs.
pub type ScalarFn = Arc<dyn Fn(&[&Tensor]) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
struct Recompute(ScalarFn);

impl fmt::Debug for Recompute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Recompute")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, geometry: ConvGeometry },
    PixelLinear { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Gelu(Var),
    Interpolate { x: Var, out_h: usize, out_w: usize },
    ConcatChannels(Vec<Var>),
    SliceChannels { x: Var, start: usize, end: usize },
    AvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape { x: Var, shape: Vec<usize> },
    Scale(Var, f64),
    Add(Var, Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    MixCandidates { cand: Var, weights: Var },
    /// Scalar with its gradient w.r.t. each input precomputed at forward time.
    Scalar { inputs: Vec<Var>, local: Vec<Tensor>, recompute: Option<Recompute> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, .. } | Op::PixelLinear { x, w, b } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Gelu(x)
            | Op::Interpolate { x, .. }
            | Op::SliceChannels { x, .. }
            | Op::AvgPool(x)
            | Op::MaxPool { x, .. }
            | Op::Transpose(x)
            | Op::Reshape { x, .. }
            | Op::Scale(x, _)
            | Op::SoftmaxRows(x)
            | Op::SoftmaxCols(x) => vec![*x],
            Op::ConcatChannels(parts) => parts.clone(),
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::MixCandidates { cand, weights } => vec![*cand, *weights],
            Op::Scalar { inputs, .. } => inputs.clone(),
        }
    }
}

fn max_pool_values(x: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let plane = x.shape()[1] * x.shape()[2];
    let mut argmax = Vec::with_capacity(x.shape()[0]);
    let mut data = Vec::with_capacity(x.shape()[0]);
    for ch in x.data().chunks(plane) {
        let (mut best, mut at) = (ch[0], 0);
        for (i, &v) in ch.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                at = i;
            }
        }
        argmax.push(at);
        data.push(best);
    }
    (data, argmax)
}

/// Forward value of `op` given its (already validated) inputs.
fn evaluate<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let t = match op {
        Op::Input | Op::Param(_) => return Err(Error::Contract("leaf nodes carry no forward rule".into())),
        Op::Conv2d { x, w, b, geometry } => {
            let out = kernels::conv2d_forward(geometry, get(*x).data(), get(*w).data(), get(*b).data());
            Tensor::new(vec![geometry.out_channels, geometry.out_height(), geometry.out_width()], out)?
        }
        Op::PixelLinear { x, w, b } => {
            let xs = get(*x).shape();
            let (c, h, wd) = (xs[0], xs[1], xs[2]);
            let o = get(*w).shape()[0];
            let out = kernels::pixel_linear_forward(get(*x).data(), get(*w).data(), get(*b).data(), c, o, h * wd);
            Tensor::new(vec![o, h, wd], out)?
        }
        Op::Linear { x, w, b } => {
            let xs = get(*x).shape();
            let (n, k) = (get(*w).shape()[0], get(*w).shape()[1]);
            let m = get(*x).numel() / k;
            let out = kernels::linear_forward(get(*x).data(), get(*w).data(), get(*b).data(), m, k, n);
            let shape = if xs.len() == 1 { vec![n] } else { vec![m, n] };
            Tensor::new(shape, out)?
        }
        Op::Gelu(x) => get(*x).map(kernels::gelu),
        Op::Interpolate { x, out_h, out_w } => tensor::interpolate_bilinear(get(*x), *out_h, *out_w)?,
        Op::ConcatChannels(parts) => {
            let (_, h, w) = get(parts[0]).dims3("concat_channels")?;
            let mut channels = 0;
            let mut data = Vec::new();
            for &p in parts {
                channels += get(p).shape()[0];
                data.extend_from_slice(get(p).data());
            }
            Tensor::new(vec![channels, h, w], data)?
        }
        Op::SliceChannels { x, start, end } => {
            let xs = get(*x).shape();
            let plane = xs[1] * xs[2];
            Tensor::new(vec![end - start, xs[1], xs[2]], get(*x).data()[start * plane..end * plane].to_vec())?
        }
        Op::AvgPool(x) => {
            let xs = get(*x).shape();
            let plane = xs[1] * xs[2];
            let data = get(*x).data().chunks(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
            Tensor::new(vec![xs[0]], data)?
        }
        Op::MaxPool { x, .. } => {
            let (data, _) = max_pool_values(get(*x));
            Tensor::new(vec![get(*x).shape()[0]], data)?
        }
        Op::MatMul(a, b) => tensor::matmul(get(*a), get(*b))?,
        Op::MatMulNt(a, b) => tensor::matmul_nt(get(*a), get(*b))?,
        Op::Transpose(a) => tensor::transpose(get(*a))?,
        Op::Reshape { x, shape } => Tensor::new(shape.clone(), get(*x).data().to_vec())?,
        Op::Scale(a, f) => get(*a).map(|v| v * f),
        Op::Add(a, b) => {
            let data = get(*a).data().iter().zip(get(*b).data()).map(|(x, y)| x + y).collect();
            Tensor::new(get(*a).shape().to_vec(), data)?
        }
        Op::SoftmaxRows(a) => tensor::softmax_rows(get(*a))?,
        Op::SoftmaxCols(a) => tensor::softmax_cols(get(*a))?,
        Op::MixCandidates { cand, weights } => {
            let (n, rc) = (get(*cand).shape()[0], get(*cand).shape()[1]);
            let r = get(*weights).shape()[1];
            let out = kernels::mix_candidates_forward(get(*cand).data(), get(*weights).data(), n, r, rc / r);
            Tensor::new(vec![n, rc / r], out)?
        }
        Op::Scalar { inputs, recompute, .. } => {
            let f = recompute
                .as_ref()
                .ok_or_else(|| Error::Contract("custom scalar was recorded without a recompute rule".into()))?;
            let values: Vec<&Tensor> = inputs.iter().map(|&v| get(v)).collect();
            Tensor::scalar((f.0)(&values)?)
        }
    };
    Ok(t)
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter adjoint into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Option<f64> {
        let t = self.value(v);
        (t.rank() == 0).then(|| t.data()[0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = evaluate(&op, |v| self.value(v))?;
        Ok(self.push(value, op))
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Square-kernel convolution, weight `O×C×k×k`, bias `O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let [o, ci, k, k2] = ws[..] else {
            return Err(Error::dim("conv2d", alloc::format!("weight shape {} is not O×C×k×k", fmt_shape(&ws))));
        };
        if ci != c || k != k2 || k % 2 == 0 || self.value(b).shape() != [o] || stride == 0 {
            return Err(Error::shapes("conv2d", self.value(x).shape(), &ws));
        }
        let geometry = ConvGeometry { in_channels: c, out_channels: o, kernel: k, stride, height: h, width: wd };
        self.record(Op::Conv2d { x, w, b, geometry })
    }

    /// Per-pixel affine map on a `C×H×W` map, weight `O×C`, bias `O`.
    pub fn pixel_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3("pixel_linear")?;
        let (o, ci) = self.value(w).dims2("pixel_linear")?;
        if ci != c || self.value(b).shape() != [o] {
            return Err(Error::shapes("pixel_linear", self.value(x).shape(), self.value(w).shape()));
        }
        self.record(Op::PixelLinear { x, w, b })
    }

    /// Row-wise affine map: `x: m×k` (or a length-`k` vector), weight `n×k`,
    /// bias `n`. The output keeps the input's rank.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let k = match xs[..] {
            [k] | [_, k] => k,
            _ => return Err(Error::dim("linear", alloc::format!("input {} is not a vector or matrix", fmt_shape(&xs)))),
        };
        let (n, k2) = self.value(w).dims2("linear")?;
        if k2 != k || self.value(b).shape() != [n] {
            return Err(Error::shapes("linear", &xs, self.value(w).shape()));
        }
        self.record(Op::Linear { x, w, b })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn interpolate(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.record(Op::Interpolate { x, out_h, out_w })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let (_, h, w) = self.value(*first).dims3("concat_channels")?;
        for &p in parts {
            let (_, ph, pw) = self.value(p).dims3("concat_channels")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shapes("concat_channels", self.value(*first).shape(), self.value(p).shape()));
            }
        }
        self.record(Op::ConcatChannels(parts.to_vec()))
    }

    /// Channels `[start, end)` of a `C×H×W` map.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3("slice_channels")?;
        if start >= end || end > c {
            return Err(Error::dim("slice_channels", alloc::format!("range {start}..{end} outside {c} channels")));
        }
        self.record(Op::SliceChannels { x, start, end })
    }

    /// Global average pool of a `C×H×W` map into a length-`C` vector.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3("avg_pool")?;
        self.record(Op::AvgPool(x))
    }

    /// Global max pool; the first maximal pixel receives the gradient.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, _, _) = self.value(x).dims3("max_pool")?;
        let (data, argmax) = max_pool_values(self.value(x));
        let t = Tensor::new(vec![c], data)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = tensor::transpose(self.value(a))?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x: a, shape: shape.to_vec() }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|v| v * factor);
        self.push(t, Op::Scale(a, factor))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shapes("add", ta.shape(), tb.shape()));
        }
        self.record(Op::Add(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(t, Op::SoftmaxRows(a)))
    }

    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SoftmaxCols(a))
    }

    /// Per-row convex mix of `r` candidate vectors: `cand` is `N×(r·C)`,
    /// `weights` is `N×r`, output `N×C`.
    pub fn mix_candidates(&mut self, cand: Var, weights: Var) -> Result<Var> {
        let (n, rc) = self.value(cand).dims2("mix_candidates")?;
        let (n2, r) = self.value(weights).dims2("mix_candidates")?;
        if n != n2 || rc % r != 0 {
            return Err(Error::shapes("mix_candidates", self.value(cand).shape(), self.value(weights).shape()));
        }
        self.record(Op::MixCandidates { cand, weights })
    }

    /// Records a scalar computed outside the tape together with its
    /// gradient w.r.t. each input.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<Var>, local: Vec<Tensor>) -> Result<Var> {
        self.scalar_node(value, inputs, local, None)
    }

    /// Like [`Graph::custom_scalar`], with a rule that recomputes the value
    /// from its inputs so the node takes part in [`Graph::replay`].
    pub fn custom_scalar_with(
        &mut self,
        value: f64,
        inputs: Vec<Var>,
        local: Vec<Tensor>,
        recompute: ScalarFn,
    ) -> Result<Var> {
        self.scalar_node(value, inputs, local, Some(Recompute(recompute)))
    }

    fn scalar_node(&mut self, value: f64, inputs: Vec<Var>, local: Vec<Tensor>, recompute: Option<Recompute>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::Contract("custom_scalar needs one local gradient per input".into()));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shapes("custom_scalar", self.value(*v).shape(), g.shape()));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs, local, recompute }))
    }

    /// Re-evaluates `target` after the value of parameter `changed` was
    /// modified in `store`, recomputing only the nodes that depend on it.
    /// The recorded values are left untouched.
    pub fn replay(&self, store: &ParamStore, changed: ParamId, target: Var) -> Result<Tensor> {
        self.replay_with(store, changed, None, target)
    }

    /// [`Graph::replay`] when only the flat entry `entry` of `changed` was
    /// modified.
    pub fn replay_entry(&self, store: &ParamStore, changed: ParamId, entry: usize, target: Var) -> Result<Tensor> {
        self.replay_with(store, changed, Some(entry), target)
    }

    fn replay_with(&self, store: &ParamStore, changed: ParamId, entry: Option<usize>, target: Var) -> Result<Tensor> {
        let mut fresh: Vec<Option<Tensor>> = vec![None; target.0 + 1];
        let mut dirty = vec![false; target.0 + 1];
        let mut any = false;
        for idx in 0..=target.0 {
            let node = &self.nodes[idx];
            match node.op {
                Op::Input => continue,
                Op::Param(id) => {
                    if id == changed {
                        dirty[idx] = true;
                        any = true;
                    }
                    continue;
                }
                _ => {}
            }
            if !any || !node.op.inputs().iter().any(|v| dirty[v.0]) {
                continue;
            }
            if let Some(value) = self.weight_update(idx, store, entry, &dirty, &fresh) {
                fresh[idx] = Some(value);
                dirty[idx] = true;
                continue;
            }
            let value = evaluate(&node.op, |v| {
                if !dirty[v.0] {
                    self.value(v)
                } else if let Op::Param(id) = self.nodes[v.0].op {
                    store.value(id)
                } else {
                    fresh[v.0].as_ref().expect("dirty nodes are recomputed in order")
                }
            })?;
            fresh[idx] = Some(value);
            dirty[idx] = true;
        }
        Ok(match (&self.nodes[target.0].op, fresh.pop().flatten()) {
            (_, Some(v)) => v,
            (Op::Param(id), None) if dirty[target.0] => store.value(*id).clone(),
            _ => self.value(target).clone(),
        })
    }

    /// For a layer whose input is unchanged and whose changed weight or
    /// bias is a parameter leaf, updates the recorded output by the exact
    /// contribution of the changed entries instead of recomputing it.
    fn weight_update(
        &self,
        idx: usize,
        store: &ParamStore,
        entry: Option<usize>,
        dirty: &[bool],
        fresh: &[Option<Tensor>],
    ) -> Option<Tensor> {
        let (x, w, b) = match &self.nodes[idx].op {
            Op::Conv2d { x, w, b, .. } | Op::PixelLinear { x, w, b } | Op::Linear { x, w, b } => (*x, *w, *b),
            _ => return None,
        };
        if dirty[x.0] {
            return self.input_update(idx, dirty, fresh);
        }
        let changed = |v: Var| -> Option<Option<Vec<(usize, f64)>>> {
            if !dirty[v.0] {
                return Some(None);
            }
            let Op::Param(id) = self.nodes[v.0].op else { return None };
            let (new, old) = (store.value(id).data(), self.value(v).data());
            let entries = match entry {
                Some(j) => vec![(j, new[j] - old[j])],
                None => new.iter().zip(old).enumerate().filter(|(_, (n, o))| n != o).map(|(j, (n, o))| (j, n - o)).collect(),
            };
            Some(Some(entries))
        };
        let (dw, db) = (changed(w)?, changed(b)?);
        let mut out = self.value(Var(idx)).clone();
        let xv = self.value(x).data();
        let od = out.data_mut();
        let per_out = od.len() / self.value(b).numel();
        match &self.nodes[idx].op {
            Op::Conv2d { geometry, .. } => {
                for &(j, d) in dw.iter().flatten() {
                    kernels::conv2d_weight_update(geometry, xv, od, j, d);
                }
                for &(o, d) in db.iter().flatten() {
                    od[o * per_out..(o + 1) * per_out].iter_mut().for_each(|v| *v += d);
                }
            }
            Op::PixelLinear { .. } => {
                let cin = self.value(w).shape()[1];
                let pixels = xv.len() / cin;
                for &(j, d) in dw.iter().flatten() {
                    let (o, c) = (j / cin, j % cin);
                    kernels::axpy(d, &xv[c * pixels..(c + 1) * pixels], &mut od[o * pixels..(o + 1) * pixels]);
                }
                for &(o, d) in db.iter().flatten() {
                    od[o * pixels..(o + 1) * pixels].iter_mut().for_each(|v| *v += d);
                }
            }
            _ => {
                let (n, k) = (self.value(w).shape()[0], self.value(w).shape()[1]);
                let m = xv.len() / k;
                for &(j, d) in dw.iter().flatten() {
                    let (o, c) = (j / k, j % k);
                    for i in 0..m {
                        od[i * n + o] += d * xv[i * k + c];
                    }
                }
                for &(o, d) in db.iter().flatten() {
                    for i in 0..m {
                        od[i * n + o] += d;
                    }
                }
            }
        }
        Some(out)
    }

    /// For a per-pixel linear layer with unchanged weights, adds `W·Δx`
    /// over the input channels that actually changed.
    fn input_update(&self, idx: usize, dirty: &[bool], fresh: &[Option<Tensor>]) -> Option<Tensor> {
        let Op::PixelLinear { x, w, b } = self.nodes[idx].op else { return None };
        if dirty[w.0] || dirty[b.0] {
            return None;
        }
        let (new, old) = (fresh[x.0].as_ref()?.data(), self.value(x).data());
        let wv = self.value(w);
        let (cout, cin) = (wv.shape()[0], wv.shape()[1]);
        let pixels = old.len() / cin;
        let mut out = self.value(Var(idx)).clone();
        let od = out.data_mut();
        let mut delta = vec![0.0; pixels];
        for c in 0..cin {
            let (n, o) = (&new[c * pixels..(c + 1) * pixels], &old[c * pixels..(c + 1) * pixels]);
            if n == o {
                continue;
            }
            for ((d, a), b) in delta.iter_mut().zip(n).zip(o) {
                *d = a - b;
            }
            for k in 0..cout {
                kernels::axpy(wv.data()[k * cin + c], &delta, &mut od[k * pixels..(k + 1) * pixels]);
            }
        }
        Some(out)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(self.value(loss).shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.push((*id, idx)),
                Op::Conv2d { x, w, b, geometry } => {
                    let (gx, gw, gb) =
                        kernels::conv2d_backward(geometry, self.value(*x).data(), self.value(*w).data(), g.data());
                    self.acc_raw(&mut grads, *x, gx);
                    self.acc_raw(&mut grads, *w, gw);
                    self.acc_raw(&mut grads, *b, gb);
                }
                Op::PixelLinear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (cin, pixels) = (xs[0], xs[1] * xs[2]);
                    let cout = self.value(*w).shape()[0];
                    let (gx, gw, gb) = kernels::pixel_linear_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        cin,
                        cout,
                        pixels,
                    );
                    self.acc_raw(&mut grads, *x, gx);
                    self.acc_raw(&mut grads, *w, gw);
                    self.acc_raw(&mut grads, *b, gb);
                }
                Op::Linear { x, w, b } => {
                    let (n, k) = (self.value(*w).shape()[0], self.value(*w).shape()[1]);
                    let m = self.value(*x).numel() / k;
                    let (gx, gw, gb) =
                        kernels::linear_backward(self.value(*x).data(), self.value(*w).data(), g.data(), m, k, n);
                    self.acc_raw(&mut grads, *x, gx);
                    self.acc_raw(&mut grads, *w, gw);
                    self.acc_raw(&mut grads, *b, gb);
                }
                Op::Gelu(x) => {
                    let gx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * kernels::gelu_derivative(xv))
                        .collect();
                    self.acc_raw(&mut grads, *x, gx);
                }
                Op::Interpolate { x, .. } => {
                    let xs = self.value(*x).shape();
                    let gx = interpolate_bilinear_backward(&g, xs[1], xs[2]);
                    self.acc_raw(&mut grads, *x, gx.into_data());
                }
                Op::ConcatChannels(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.acc_raw(&mut grads, p, g.data()[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceChannels { x, start, .. } => {
                    let xs = self.value(*x).shape();
                    let plane = xs[1] * xs[2];
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    gx[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
                    self.acc_raw(&mut grads, *x, gx);
                }
                Op::AvgPool(x) => {
                    let xs = self.value(*x).shape();
                    let plane = xs[1] * xs[2];
                    let mut gx = Vec::with_capacity(self.value(*x).numel());
                    for &gv in g.data() {
                        gx.extend(core::iter::repeat_n(gv / plane as f64, plane));
                    }
                    self.acc_raw(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let plane = xs[1] * xs[2];
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (c, (&at, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                        gx[c * plane + at] = gv;
                    }
                    self.acc_raw(&mut grads, *x, gx);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = tensor::matmul(&g, &tensor::transpose(tb)?)?;
                    let gb = tensor::matmul(&tensor::transpose(ta)?, &g)?;
                    self.acc_raw(&mut grads, *a, ga.into_data());
                    self.acc_raw(&mut grads, *b, gb.into_data());
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = tensor::matmul(&g, tb)?;
                    let gb = tensor::matmul(&tensor::transpose(&g)?, ta)?;
                    self.acc_raw(&mut grads, *a, ga.into_data());
                    self.acc_raw(&mut grads, *b, gb.into_data());
                }
                Op::Transpose(a) => {
                    let ga = tensor::transpose(&g)?;
                    self.acc_raw(&mut grads, *a, ga.into_data());
                }
                Op::Reshape { x, .. } => self.acc_raw(&mut grads, *x, g.data().to_vec()),
                Op::Scale(a, f) => {
                    let ga = g.data().iter().map(|v| v * f).collect();
                    self.acc_raw(&mut grads, *a, ga);
                }
                Op::Add(a, b) => {
                    self.acc_raw(&mut grads, *a, g.data().to_vec());
                    self.acc_raw(&mut grads, *b, g.data().to_vec());
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let n = s.shape()[1];
                    let mut ga = vec![0.0; s.numel()];
                    for ((srow, grow), out) in s.data().chunks(n).zip(g.data().chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        for ((o, &sv), &gv) in out.iter_mut().zip(srow).zip(grow) {
                            *o = sv * (gv - dot);
                        }
                    }
                    self.acc_raw(&mut grads, *a, ga);
                }
                Op::SoftmaxCols(a) => {
                    let s = &node.value;
                    let n = s.shape()[1];
                    let mut dot = vec![0.0; n];
                    for (srow, grow) in s.data().chunks(n).zip(g.data().chunks(n)) {
                        for ((d, &sv), &gv) in dot.iter_mut().zip(srow).zip(grow) {
                            *d += sv * gv;
                        }
                    }
                    let ga = s.data().iter().zip(g.data()).enumerate().map(|(i, (&sv, &gv))| sv * (gv - dot[i % n])).collect();
                    self.acc_raw(&mut grads, *a, ga);
                }
                Op::MixCandidates { cand, weights } => {
                    let (n, r) = (self.value(*weights).shape()[0], self.value(*weights).shape()[1]);
                    let width = node.value.shape()[1];
                    let (gc, gw) = kernels::mix_candidates_backward(
                        self.value(*cand).data(),
                        self.value(*weights).data(),
                        g.data(),
                        n,
                        r,
                        width,
                    );
                    self.acc_raw(&mut grads, *cand, gc);
                    self.acc_raw(&mut grads, *weights, gw);
                }
                Op::Scalar { inputs, local, .. } => {
                    let up = g.data()[0];
                    for (&v, lg) in inputs.iter().zip(local) {
                        self.acc_raw(&mut grads, v, lg.data().iter().map(|x| x * up).collect());
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn acc_raw(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape();
                *slot = Some(Tensor::new(shape.to_vec(), delta).expect("adjoint shape matches node"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, Rng};

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Scalar probe `Σ c·y` with fixed random weights `c`.
    fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = Rng::new(seed);
        let c = random(&mut rng, g.value(y).shape());
        let value = g.value(y).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        g.custom_scalar(value, vec![y], vec![c])
    }

    fn store(shapes: &[(&str, &[usize])], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        let ids = shapes.iter().map(|(n, sh)| s.add(*n, random(&mut rng, sh)).unwrap()).collect();
        (s, ids)
    }

    fn assert_grad_ok(s: &mut ParamStore, f: impl FnMut(&ParamStore, &mut Graph) -> Result<Var>) {
        let r = check_gradients(s, 1e-5, f).unwrap();
        assert!(r.max_relative_error < 1e-7, "{r:?}");
    }

    #[test]
    fn conv2d_gradients() {
        for stride in [1, 2] {
            let (mut s, ids) = store(&[("x", &[2, 6, 4]), ("w", &[3, 2, 3, 3]), ("b", &[3])], 1);
            assert_grad_ok(&mut s, |st, g| {
                let (x, w, b) = (g.param(st, ids[0]), g.param(st, ids[1]), g.param(st, ids[2]));
                let y = g.conv2d(x, w, b, stride)?;
                probe(g, y, 2)
            });
        }
    }

    #[test]
    fn pixel_linear_and_gelu_gradients() {
        let (mut s, ids) = store(&[("x", &[3, 2, 3]), ("w", &[4, 3]), ("b", &[4])], 3);
        assert_grad_ok(&mut s, |st, g| {
            let (x, w, b) = (g.param(st, ids[0]), g.param(st, ids[1]), g.param(st, ids[2]));
            let y = g.pixel_linear(x, w, b)?;
            let y = g.gelu(y);
            probe(g, y, 4)
        });
    }

    #[test]
    fn linear_gradients_vector_and_matrix() {
        for xs in [&[3usize][..], &[2, 3][..]] {
            let (mut s, ids) = store(&[("x", xs), ("w", &[5, 3]), ("b", &[5])], 5);
            assert_grad_ok(&mut s, |st, g| {
                let (x, w, b) = (g.param(st, ids[0]), g.param(st, ids[1]), g.param(st, ids[2]));
                let y = g.linear(x, w, b)?;
                probe(g, y, 6)
            });
        }
    }

    #[test]
    fn interpolate_concat_slice_pool_gradients() {
        let (mut s, ids) = store(&[("a", &[2, 2, 3]), ("b", &[3, 4, 5])], 7);
        assert_grad_ok(&mut s, |st, g| {
            let a = g.param(st, ids[0]);
            let b = g.param(st, ids[1]);
            let up = g.interpolate(a, 4, 5)?;
            let cat = g.concat_channels(&[up, b])?;
            let lo = g.slice_channels(cat, 0, 3)?;
            let hi = g.slice_channels(cat, 3, 5)?;
            let avg = g.avg_pool(lo)?;
            let max = g.max_pool(hi)?;
            let ya = probe(g, avg, 8)?;
            let yb = probe(g, max, 9)?;
            g.add(ya, yb)
        });
    }

    #[test]
    fn matmul_transpose_softmax_scale_gradients() {
        let (mut s, ids) = store(&[("a", &[3, 4]), ("b", &[4, 2])], 10);
        assert_grad_ok(&mut s, |st, g| {
            let a = g.param(st, ids[0]);
            let b = g.param(st, ids[1]);
            let m = g.matmul(a, b)?;
            let t = g.transpose(m)?;
            let t = g.scale(t, 0.7);
            let sm = g.softmax_rows(t)?;
            let r = g.reshape(sm, &[6])?;
            probe(g, r, 11)
        });
    }

    #[test]
    fn matmul_nt_and_softmax_cols() {
        let (mut s, ids) = store(&[("a", &[3, 4]), ("b", &[5, 4])], 15);
        let (a, b) = (s.value(ids[0]).clone(), s.value(ids[1]).clone());
        let nt = tensor::matmul_nt(&a, &b).unwrap();
        let oracle = tensor::matmul(&a, &tensor::transpose(&b).unwrap()).unwrap();
        for (x, y) in nt.data().iter().zip(oracle.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let cols = tensor::softmax_cols(&nt).unwrap();
        let rows = tensor::transpose(&tensor::softmax_rows(&tensor::transpose(&nt).unwrap()).unwrap()).unwrap();
        for (x, y) in cols.data().iter().zip(rows.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_grad_ok(&mut s, |st, g| {
            let a = g.param(st, ids[0]);
            let b = g.param(st, ids[1]);
            let m = g.matmul_nt(a, b)?;
            let sm = g.softmax_cols(m)?;
            probe(g, sm, 16)
        });
    }

    fn replay_net(st: &ParamStore, ids: &[ParamId], g: &mut Graph) -> Result<Var> {
        let p: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect();
        let y = g.conv2d(p[0], p[1], p[2], 2)?;
        let y = g.gelu(y);
        let y = g.pixel_linear(y, p[3], p[4])?;
        let (c, h, w) = g.value(y).dims3("test")?;
        let flat = g.reshape(y, &[c, h * w])?;
        let flat = g.transpose(flat)?;
        let z = g.linear(flat, p[5], p[6])?;
        let z = g.softmax_cols(z)?;
        let value = g.value(z).data().iter().map(|v| v * v).sum();
        let local = g.value(z).map(|v| 2.0 * v);
        g.custom_scalar_with(value, vec![z], vec![local], Arc::new(|v: &[&Tensor]| Ok(v[0].data().iter().map(|x| x * x).sum())))
    }

    #[test]
    fn replay_matches_rebuild() {
        let shapes: &[(&str, &[usize])] = &[
            ("x", &[2, 6, 6]),
            ("cw", &[3, 2, 3, 3]),
            ("cb", &[3]),
            ("pw", &[4, 3]),
            ("pb", &[4]),
            ("lw", &[5, 4]),
            ("lb", &[5]),
        ];
        let (mut s, ids) = store(shapes, 17);
        let mut g = Graph::new();
        let loss = replay_net(&s, &ids, &mut g).unwrap();
        let mut rng = Rng::new(18);
        for &id in &ids {
            for _ in 0..3 {
                let j = rng.below(s.value(id).numel());
                let before = s.value(id).data()[j];
                s.get_mut(id).value.data_mut()[j] = before + 1e-3;
                let replayed = g.replay(&s, id, loss).unwrap().item().unwrap();
                assert_eq!(g.replay_entry(&s, id, j, loss).unwrap().item().unwrap(), replayed);
                let mut fresh = Graph::new();
                let v = replay_net(&s, &ids, &mut fresh).unwrap();
                let rebuilt = fresh.scalar_value(v).unwrap();
                assert!((replayed - rebuilt).abs() <= 1e-13 * rebuilt.abs().max(1.0), "{id:?}: {replayed} vs {rebuilt}");
                s.get_mut(id).value.data_mut()[j] = before;
            }
        }
    }

    #[test]
    fn mix_candidates_gradients() {
        let (mut s, ids) = store(&[("c", &[2, 6]), ("w", &[2, 3])], 12);
        assert_grad_ok(&mut s, |st, g| {
            let c = g.param(st, ids[0]);
            let w = g.param(st, ids[1]);
            let y = g.mix_candidates(c, w)?;
            probe(g, y, 13)
        });
    }

    #[test]
    fn reused_nodes_accumulate() {
        let (s, ids) = store(&[("a", &[2])], 14);
        let mut g = Graph::new();
        let a = g.param(&s, ids[0]);
        let y = g.add(a, a).unwrap();
        let l = g.custom_scalar(0.0, vec![y], vec![Tensor::full(&[2], 1.0)]).unwrap();
        assert_eq!(g.backward(l).unwrap().wrt(a).unwrap().data(), &[2.0, 2.0]);
    }
}
