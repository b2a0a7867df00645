//! Cross-entropy, soft Dice, the dictionary contrastive loss and the
//! λ-weighted dual-branch total.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs, so it can be attached to a [`Graph`] as a single scalar node.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabelMap;
use crate::dictionary::{class_centers, sq_dist};
use crate::numerics::{math, Graph, ScalarFn, Tensor, Var};
use crate::{Error, Result};

pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_static: f64,
    pub lambda_dynamic: f64,
    pub epsilon: f64,
    pub ignore_label: u8,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Adds the contrastive term to the dynamic branch.
    pub use_contrastive: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_static: 0.4,
            lambda_dynamic: 1.0,
            epsilon: 1e-6,
            ignore_label: 255,
            ce_weight: 1.0,
            dice_weight: 1.0,
            use_contrastive: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_static", self.lambda_static),
            ("lambda_dynamic", self.lambda_dynamic),
            ("ce_weight", self.ce_weight),
            ("dice_weight", self.dice_weight),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `ce_weight·ce + dice_weight·dice`.
    pub fn segmentation(&self, ce: f64, dice: f64) -> f64 {
        self.ce_weight * ce + self.dice_weight * dice
    }

    /// `λ_s·L_static + λ_d·(L_seg_dynamic + con)`.
    pub fn combine(&self, ce_s: f64, dice_s: f64, ce_d: f64, dice_d: f64, con: f64) -> f64 {
        self.lambda_static * self.segmentation(ce_s, dice_s) + self.lambda_dynamic * (self.segmentation(ce_d, dice_d) + con)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce_static: f64,
    pub dice_static: f64,
    pub ce_dynamic: f64,
    pub dice_dynamic: f64,
    pub con: f64,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    /// Every labelled pixel of the batch was ignored.
    pub all_ignored: bool,
    /// The contrastive term was forced to zero (`B = 1` or `N = 1`).
    pub con_degenerate: bool,
}

impl LossBreakdown {
    pub fn static_loss(&self, w: &LossWeights) -> f64 {
        w.segmentation(self.ce_static, self.dice_static)
    }

    pub fn dynamic_loss(&self, w: &LossWeights) -> f64 {
        w.segmentation(self.ce_dynamic, self.dice_dynamic) + self.con
    }

    /// Recomputes the total from the components already in the record.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.combine(self.ce_static, self.dice_static, self.ce_dynamic, self.dice_dynamic, self.con)
    }
}

/// Scalar loss with the gradient with respect to each input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Tensor>,
    pub degenerate: bool,
}

fn check_batch(logits: &[&Tensor], labels: &[&LabelMap], ignore: u8) -> Result<usize> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Contract(format!("{} logit maps for {} label maps", logits.len(), labels.len())));
    }
    let n = logits[0].shape().first().copied().unwrap_or(0);
    for (lg, lb) in logits.iter().zip(labels) {
        let (c, h, w) = lg.dims3("segmentation loss")?;
        if c != n || h != lb.height() || w != lb.width() {
            return Err(Error::dim(
                "segmentation loss",
                format!("logits {:?} against {}x{} labels", lg.shape(), lb.height(), lb.width()),
            ));
        }
        lb.validate(n, ignore)?;
    }
    Ok(n)
}

/// Per-pixel softmax of an `N×H×W` logit map: probabilities laid out like
/// the logits, plus the log-partition of every pixel.
struct PixelSoftmax {
    probs: Vec<f64>,
    lse: Vec<f64>,
}

impl PixelSoftmax {
    fn new(logits: &Tensor) -> Self {
        let n = logits.shape()[0];
        let p = logits.numel() / n;
        let mut probs = logits.data().to_vec();
        let mut max = probs[..p].to_vec();
        for plane in probs.chunks(p).skip(1) {
            for (m, &v) in max.iter_mut().zip(plane) {
                *m = m.max(v);
            }
        }
        let mut z = vec![0.0; p];
        for plane in probs.chunks_mut(p) {
            for ((v, &m), t) in plane.iter_mut().zip(&max).zip(z.iter_mut()) {
                *v = math::exp(*v - m);
                *t += *v;
            }
        }
        for plane in probs.chunks_mut(p) {
            for (v, &t) in plane.iter_mut().zip(&z) {
                *v /= t;
            }
        }
        let lse = max.iter().zip(&z).map(|(&m, &t)| m + math::ln(t)).collect();
        Self { probs, lse }
    }
}

/// Mean of `−log softmax(logits)[label]` over all non-ignored pixels of
/// the batch.
pub fn cross_entropy(logits: &[&Tensor], labels: &[&LabelMap], ignore: u8) -> Result<LossValue> {
    let n = check_batch(logits, labels, ignore)?;
    let soft: Vec<PixelSoftmax> = logits.iter().map(|t| PixelSoftmax::new(t)).collect();
    Ok(ce_from(logits, &soft, labels, ignore, n, true))
}

/// Without `want_grads` the returned gradient list is empty.
fn ce_from(
    logits: &[&Tensor],
    soft: &[PixelSoftmax],
    labels: &[&LabelMap],
    ignore: u8,
    n: usize,
    want_grads: bool,
) -> LossValue {
    let count: usize = labels.iter().map(|l| l.data().iter().filter(|&&v| v != ignore).count()).sum();
    let mut grads: Vec<Tensor> =
        if want_grads { logits.iter().map(|t| Tensor::zeros(t.shape())).collect() } else { Vec::new() };
    if count == 0 {
        return LossValue { value: 0.0, grads, degenerate: true };
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    for (k, ((lg, sm), lb)) in logits.iter().zip(soft).zip(labels).enumerate() {
        let p = lb.len();
        let x = lg.data();
        for (i, &y) in lb.data().iter().enumerate() {
            if y != ignore {
                total += sm.lse[i] - x[y as usize * p + i];
            }
        }
        if !want_grads {
            continue;
        }
        let gd = grads[k].data_mut();
        for (i, &y) in lb.data().iter().enumerate() {
            if y == ignore {
                continue;
            }
            for c in 0..n {
                gd[c * p + i] = sm.probs[c * p + i] * inv;
            }
            gd[y as usize * p + i] -= inv;
        }
    }
    LossValue { value: total * inv, grads, degenerate: false }
}

/// Smoothed soft Dice pooled over the batch, averaged over the classes
/// that occur in the labels or in the argmax predictions.
pub fn dice_loss(logits: &[&Tensor], labels: &[&LabelMap], ignore: u8) -> Result<LossValue> {
    let n = check_batch(logits, labels, ignore)?;
    let soft: Vec<PixelSoftmax> = logits.iter().map(|t| PixelSoftmax::new(t)).collect();
    Ok(dice_from(logits, &soft, labels, ignore, n, true))
}

fn dice_from(
    logits: &[&Tensor],
    soft: &[PixelSoftmax],
    labels: &[&LabelMap],
    ignore: u8,
    n: usize,
    want_grads: bool,
) -> LossValue {
    let mut inter = vec![0.0; n];
    let mut psum = vec![0.0; n];
    let mut gsum = vec![0.0; n];
    let mut present = vec![false; n];
    for ((sm, lb), lg) in soft.iter().zip(labels).zip(logits) {
        let pr = &sm.probs;
        let p = lb.len();
        for (i, &y) in lb.data().iter().enumerate() {
            if y == ignore {
                continue;
            }
            let y = y as usize;
            present[y] = true;
            present[argmax_pixel(lg.data(), n, p, i)] = true;
            gsum[y] += 1.0;
            inter[y] += pr[y * p + i];
            for c in 0..n {
                psum[c] += pr[c * p + i];
            }
        }
    }
    let classes: Vec<usize> = (0..n).filter(|&c| present[c]).collect();
    let mut grads: Vec<Tensor> =
        if want_grads { logits.iter().map(|t| Tensor::zeros(t.shape())).collect() } else { Vec::new() };
    if classes.is_empty() {
        return LossValue { value: 0.0, grads, degenerate: true };
    }
    let k = classes.len() as f64;
    let s = DICE_SMOOTHING;
    let mut value = 0.0;
    // ∂L/∂p_c = (1/k)·(num/den² − 2·g_c/den): a label-free part plus a
    // part that only applies at the true class.
    let mut coef_inter = vec![0.0; n];
    let mut coef_sum = vec![0.0; n];
    for &c in &classes {
        let num = 2.0 * inter[c] + s;
        let den = psum[c] + gsum[c] + s;
        value += 1.0 - num / den;
        coef_inter[c] = -2.0 / (k * den);
        coef_sum[c] = num / (k * den * den);
    }
    value /= k;
    if !want_grads {
        return LossValue { value, grads, degenerate: false };
    }
    for ((sm, lb), g) in soft.iter().zip(labels).zip(grads.iter_mut()) {
        let pr = &sm.probs;
        let p = lb.len();
        let gd = g.data_mut();
        let mut dp = vec![0.0; n];
        for (i, &y) in lb.data().iter().enumerate() {
            if y == ignore {
                continue;
            }
            for c in 0..n {
                dp[c] = coef_sum[c] + if c == y as usize { coef_inter[c] } else { 0.0 };
            }
            let dot: f64 = (0..n).map(|c| dp[c] * pr[c * p + i]).sum();
            for c in 0..n {
                gd[c * p + i] = pr[c * p + i] * (dp[c] - dot);
            }
        }
    }
    LossValue { value, grads, degenerate: false }
}

/// Cross-entropy and Dice from one softmax pass.
fn segmentation_losses(
    logits: &[&Tensor],
    labels: &[&LabelMap],
    ignore: u8,
    want_grads: bool,
) -> Result<(LossValue, LossValue)> {
    let n = check_batch(logits, labels, ignore)?;
    let soft: Vec<PixelSoftmax> = logits.iter().map(|t| PixelSoftmax::new(t)).collect();
    Ok((ce_from(logits, &soft, labels, ignore, n, want_grads), dice_from(logits, &soft, labels, ignore, n, want_grads)))
}

/// First index of the largest logit at pixel `i`.
fn argmax_pixel(x: &[f64], n: usize, p: usize, i: usize) -> usize {
    let mut best = 0;
    for c in 1..n {
        if x[c * p + i] > x[best * p + i] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveValue {
    pub con: f64,
    pub intra: f64,
    pub inter: f64,
    /// Gradient of `con` with respect to each sample's dictionary.
    pub grads: Vec<Tensor>,
    pub degenerate: bool,
}

/// `intra / (inter + ε)` over per-sample dictionaries `D^{(b)}: N×C′`.
pub fn contrastive_loss(dicts: &[&Tensor], epsilon: f64) -> Result<ContrastiveValue> {
    let (mu, n, width) = class_centers(dicts)?;
    if n == 0 {
        return Err(Error::Contract("contrastive loss needs at least one class".into()));
    }
    let b = dicts.len();
    let bn = (b * n) as f64;
    let mut intra = 0.0;
    for d in dicts {
        for i in 0..n {
            intra += sq_dist(&d.data()[i * width..(i + 1) * width], &mu[i * width..(i + 1) * width]);
        }
    }
    intra /= bn;
    let pair_scale = if n > 1 { 2.0 / (n * (n - 1)) as f64 } else { 0.0 };
    let mut inter = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            inter += sq_dist(&mu[i * width..(i + 1) * width], &mu[j * width..(j + 1) * width]);
        }
    }
    inter *= pair_scale;

    let mut grads: Vec<Tensor> = dicts.iter().map(|d| Tensor::zeros(d.shape())).collect();
    if b == 1 || n == 1 {
        return Ok(ContrastiveValue { con: 0.0, intra, inter, grads, degenerate: true });
    }
    let den = inter + epsilon;
    let con = intra / den;
    // ∂inter/∂μ_i = 2·scale·Σ_{j≠i}(μ_i − μ_j), and ∂μ_i/∂D^{(b,i)} = 1/B.
    let mut dmu = vec![0.0; n * width];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                for k in 0..width {
                    dmu[i * width + k] += 2.0 * pair_scale * (mu[i * width + k] - mu[j * width + k]);
                }
            }
        }
    }
    let a = 1.0 / den;
    let q = -intra / (den * den) / b as f64;
    for (d, g) in dicts.iter().zip(grads.iter_mut()) {
        for (idx, gv) in g.data_mut().iter_mut().enumerate() {
            let d_intra = 2.0 / bn * (d.data()[idx] - mu[idx]);
            *gv = a * d_intra + q * dmu[idx];
        }
    }
    Ok(ContrastiveValue { con, intra, inter, grads, degenerate: false })
}

/// Graph handles of one batch's outputs.
#[derive(Debug, Clone, Default)]
pub struct BranchOutputs {
    /// Per-sample `N×H×W` static-branch logits; empty when the static
    /// branch was not run.
    pub static_logits: Vec<Var>,
    pub dynamic_logits: Vec<Var>,
    /// Per-sample final dynamic dictionaries `N×C′`.
    pub dynamic_dicts: Vec<Var>,
}

/// Loss values and local gradients of one batch, inputs in the order
/// static logits, dynamic logits, dynamic dictionaries.
struct Evaluated {
    breakdown: LossBreakdown,
    local: Vec<Tensor>,
}

fn evaluate_total(
    static_logits: &[&Tensor],
    dynamic_logits: &[&Tensor],
    dicts: &[&Tensor],
    labels: &[&LabelMap],
    w: &LossWeights,
    want_grads: bool,
) -> Result<Evaluated> {
    let ignore = w.ignore_label;
    let (ce_d, dice_d) = segmentation_losses(dynamic_logits, labels, ignore, want_grads)?;
    let stat = if static_logits.is_empty() { None } else { Some(segmentation_losses(static_logits, labels, ignore, want_grads)?) };
    let con = contrastive_loss(dicts, w.epsilon)?;
    let con_value = if w.use_contrastive { con.con } else { 0.0 };

    let mut b = LossBreakdown {
        ce_static: stat.as_ref().map_or(0.0, |v| v.0.value),
        dice_static: stat.as_ref().map_or(0.0, |v| v.1.value),
        ce_dynamic: ce_d.value,
        dice_dynamic: dice_d.value,
        con: con_value,
        intra: con.intra,
        inter: con.inter,
        total: 0.0,
        all_ignored: ce_d.degenerate,
        con_degenerate: con.degenerate,
    };
    b.total = b.recombine(w);
    if !want_grads {
        return Ok(Evaluated { breakdown: b, local: Vec::new() });
    }

    let seg_grad = |ce: &LossValue, dice: &LossValue, lambda: f64, k: usize| -> Tensor {
        let mut t = ce.grads[k].clone();
        for (a, d) in t.data_mut().iter_mut().zip(dice.grads[k].data()) {
            *a = lambda * (w.ce_weight * *a + w.dice_weight * d);
        }
        t
    };
    let mut local = Vec::new();
    if let Some((ce, dice)) = &stat {
        local.extend((0..static_logits.len()).map(|k| seg_grad(ce, dice, w.lambda_static, k)));
    }
    local.extend((0..dynamic_logits.len()).map(|k| seg_grad(&ce_d, &dice_d, w.lambda_dynamic, k)));
    if w.use_contrastive {
        local.extend(con.grads.iter().map(|g| g.map(|x| w.lambda_dynamic * x)));
    }
    Ok(Evaluated { breakdown: b, local })
}

/// Assembles the total loss as one graph node and reports the breakdown.
///
/// The node's value is exactly [`LossWeights::combine`] of the breakdown
/// fields; its local gradients are the matching λ-weighted sums. The node
/// can be replayed.
pub fn total_loss(
    g: &mut Graph,
    out: &BranchOutputs,
    labels: &[&LabelMap],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let refs = |vars: &[Var], g: &Graph| -> Vec<Tensor> { vars.iter().map(|&v| g.value(v).clone()).collect() };
    let (st, dy, di) = (refs(&out.static_logits, g), refs(&out.dynamic_logits, g), refs(&out.dynamic_dicts, g));
    let ev = evaluate_total(&st.iter().collect::<Vec<_>>(), &dy.iter().collect::<Vec<_>>(), &di.iter().collect::<Vec<_>>(), labels, w, true)?;

    let mut inputs = Vec::new();
    inputs.extend_from_slice(&out.static_logits);
    inputs.extend_from_slice(&out.dynamic_logits);
    if w.use_contrastive {
        inputs.extend_from_slice(&out.dynamic_dicts);
    }
    let (ns, nd) = (out.static_logits.len(), out.dynamic_logits.len());
    let owned: Vec<LabelMap> = labels.iter().map(|&l| l.clone()).collect();
    let weights = *w;
    let recompute: ScalarFn = Arc::new(move |values: &[&Tensor]| {
        let labels: Vec<&LabelMap> = owned.iter().collect();
        let dicts = if weights.use_contrastive { &values[ns + nd..] } else { &[][..] };
        let ev = evaluate_total(&values[..ns], &values[ns..ns + nd], dicts, &labels, &weights, false)?;
        Ok(ev.breakdown.total)
    });
    let node = g.custom_scalar_with(ev.breakdown.total, inputs, ev.local, recompute)?;
    Ok((node, ev.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn random_labels(rng: &mut Rng, h: usize, w: usize, n: usize, ignore_rate: f64) -> LabelMap {
        let data = (0..h * w).map(|_| if rng.uniform() < ignore_rate { 255 } else { rng.below(n) as u8 }).collect();
        LabelMap::new(h, w, data).unwrap()
    }

    fn ce_oracle(logits: &[Tensor], labels: &[LabelMap]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (lg, lb) in logits.iter().zip(labels) {
            let n = lg.shape()[0];
            for y in 0..lb.height() {
                for x in 0..lb.width() {
                    let t = lb.get(y, x);
                    if t == 255 {
                        continue;
                    }
                    let z: f64 = (0..n).map(|c| lg.get(&[c, y, x]).exp()).sum();
                    total += -(lg.get(&[t as usize, y, x]).exp() / z).ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    fn dice_oracle(logits: &[Tensor], labels: &[LabelMap]) -> f64 {
        let n = logits[0].shape()[0];
        let mut sums = vec![(0.0, 0.0, 0.0); n];
        let mut present = vec![false; n];
        for (lg, lb) in logits.iter().zip(labels) {
            for y in 0..lb.height() {
                for x in 0..lb.width() {
                    let t = lb.get(y, x);
                    if t == 255 {
                        continue;
                    }
                    let z: f64 = (0..n).map(|c| lg.get(&[c, y, x]).exp()).sum();
                    let mut arg = 0;
                    for c in 0..n {
                        let p = lg.get(&[c, y, x]).exp() / z;
                        let gt = (c == t as usize) as u8 as f64;
                        sums[c].0 += p * gt;
                        sums[c].1 += p;
                        sums[c].2 += gt;
                        if lg.get(&[c, y, x]) > lg.get(&[arg, y, x]) {
                            arg = c;
                        }
                    }
                    present[t as usize] = true;
                    present[arg] = true;
                }
            }
        }
        let terms: Vec<f64> = (0..n)
            .filter(|&c| present[c])
            .map(|c| 1.0 - (2.0 * sums[c].0 + 1.0) / (sums[c].1 + sums[c].2 + 1.0))
            .collect();
        terms.iter().sum::<f64>() / terms.len() as f64
    }

    fn refs<T>(v: &[T]) -> Vec<&T> {
        v.iter().collect()
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let lg = Tensor::zeros(&[4, 2, 3]);
        let lb = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let v = cross_entropy(&[&lg], &[&lb], 255).unwrap();
        assert!((v.value - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_vanish() {
        let lb = LabelMap::new(1, 3, vec![2, 0, 1]).unwrap();
        let mut lg = Tensor::zeros(&[3, 1, 3]);
        for x in 0..3 {
            lg.data_mut()[lb.data()[x] as usize * 3 + x] = 40.0;
        }
        assert!(cross_entropy(&[&lg], &[&lb], 255).unwrap().value < 1e-6);
        assert!(dice_loss(&[&lg], &[&lb], 255).unwrap().value < 1e-3);
    }

    #[test]
    fn ce_and_dice_match_loop_oracles() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let lg: Vec<Tensor> = (0..2).map(|_| random(&mut rng, &[3, 2, 2], 2.0)).collect();
            let lb: Vec<LabelMap> = (0..2).map(|_| random_labels(&mut rng, 2, 2, 3, 0.2)).collect();
            if lb.iter().all(|l| l.data().iter().all(|&v| v == 255)) {
                continue;
            }
            let ce = cross_entropy(&refs(&lg), &refs(&lb), 255).unwrap();
            assert!((ce.value - ce_oracle(&lg, &lb)).abs() < 1e-12);
            let dice = dice_loss(&refs(&lg), &refs(&lb), 255).unwrap();
            assert!((dice.value - dice_oracle(&lg, &lb)).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_dice_hand_case() {
        // Four pixels of class 0 predicted (hard) as class 1 and vice versa.
        let lb = LabelMap::new(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let mut lg = Tensor::zeros(&[2, 2, 4]);
        for i in 0..8 {
            let wrong = 1 - lb.data()[i] as usize;
            lg.data_mut()[wrong * 8 + i] = 800.0;
        }
        let v = dice_loss(&[&lg], &[&lb], 255).unwrap();
        assert!((v.value - (1.0 - 1.0 / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_degenerate_zero() {
        let lg = Tensor::zeros(&[2, 2, 2]);
        let lb = LabelMap::filled(2, 2, 255);
        let ce = cross_entropy(&[&lg], &[&lb], 255).unwrap();
        assert_eq!((ce.value, ce.degenerate), (0.0, true));
        assert!(dice_loss(&[&lg], &[&lb], 255).unwrap().degenerate);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let lg = Tensor::zeros(&[2, 1, 2]);
        let lb = LabelMap::new(1, 2, vec![0, 7]).unwrap();
        let err = cross_entropy(&[&lg], &[&lb], 255).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("x=1")), "{err}");
    }

    #[test]
    fn contrastive_hand_cases() {
        let d1 = Tensor::from_rows(&[&[0.0, 0.0], &[2.0, 0.0]]).unwrap();
        let d2 = Tensor::from_rows(&[&[2.0, 0.0], &[4.0, 0.0]]).unwrap();
        let v = contrastive_loss(&[&d1, &d2], 1e-6).unwrap();
        assert!((v.intra - 1.0).abs() < 1e-12);
        assert!((v.inter - 4.0).abs() < 1e-12);
        assert!((v.con - 1.0 / (4.0 + 1e-6)).abs() < 1e-12);

        let v = contrastive_loss(&[&d1], 1e-6).unwrap();
        assert_eq!((v.intra, v.inter, v.con, v.degenerate), (0.0, 4.0, 0.0, true));

        let v = contrastive_loss(&[&d1, &d1.clone()], 1e-6).unwrap();
        assert_eq!((v.intra, v.con), (0.0, 0.0));

        let one = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let two = Tensor::from_rows(&[&[3.0, 2.0]]).unwrap();
        let v = contrastive_loss(&[&one, &two], 1e-6).unwrap();
        assert!(v.degenerate);
        assert_eq!(v.con, 0.0);
    }

    #[test]
    fn contrastive_translation_and_scale() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let ds: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[4, 3], 1.0)).collect();
            let base = contrastive_loss(&refs(&ds), 1e-6).unwrap();
            let shift = [0.7, -2.0, 5.0];
            let moved: Vec<Tensor> = ds
                .iter()
                .map(|d| {
                    let mut t = d.clone();
                    t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += shift[i % 3]);
                    t
                })
                .collect();
            let m = contrastive_loss(&refs(&moved), 1e-6).unwrap();
            assert!((m.intra - base.intra).abs() < 1e-9 && (m.inter - base.inter).abs() < 1e-9);
            let s = 3.0;
            let scaled: Vec<Tensor> = ds.iter().map(|d| d.map(|v| s * v)).collect();
            let sc = contrastive_loss(&refs(&scaled), 1e-6).unwrap();
            // con(sD) = s²·intra / (s²·inter + ε); the gap to con(D) is at
            // most intra·ε·|1 − 1/s²| / (inter·(inter + ε)).
            let bound = base.intra * 1e-6 * (1.0 - 1.0 / (s * s)).abs() / (base.inter * (base.inter + 1e-6));
            assert!((sc.con - base.con).abs() <= bound * (1.0 + 1e-9) + 1e-15);
        }
    }

    fn probe_graph_check(label_rate: f64, seed: u64) {
        use crate::numerics::{check_gradients, ParamStore};
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let s: Vec<_> = (0..2).map(|b| store.add(format!("s{b}"), random(&mut rng, &[3, 2, 2], 1.5)).unwrap()).collect();
        let d: Vec<_> = (0..2).map(|b| store.add(format!("d{b}"), random(&mut rng, &[3, 2, 2], 1.5)).unwrap()).collect();
        let k: Vec<_> = (0..2).map(|b| store.add(format!("k{b}"), random(&mut rng, &[3, 4], 1.0)).unwrap()).collect();
        let labels: Vec<LabelMap> = (0..2).map(|_| random_labels(&mut rng, 2, 2, 3, label_rate)).collect();
        let w = LossWeights::default();
        let r = check_gradients(&mut store, 1e-5, |st, g| {
            let out = BranchOutputs {
                static_logits: s.iter().map(|&id| g.param(st, id)).collect(),
                dynamic_logits: d.iter().map(|&id| g.param(st, id)).collect(),
                dynamic_dicts: k.iter().map(|&id| g.param(st, id)).collect(),
            };
            Ok(total_loss(g, &out, &refs(&labels), &w)?.0)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn total_loss_gradients() {
        probe_graph_check(0.0, 4);
        probe_graph_check(0.3, 5);
    }

    #[test]
    fn weighted_total_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(w.combine(1.0, 1.0, 1.0, 1.0, 1.0), 0.4 * 2.0 + 3.0);
        assert!((w.combine(1.0, 1.0, 1.0, 1.0, 1.0) - 3.8).abs() < 1e-15);
    }

    #[test]
    fn static_weight_zero_leaves_dynamic_only() {
        let mut rng = Rng::new(8);
        let mut g = Graph::new();
        let lb = random_labels(&mut rng, 2, 2, 3, 0.0);
        let out = BranchOutputs {
            static_logits: vec![g.input(random(&mut rng, &[3, 2, 2], 1.0))],
            dynamic_logits: vec![g.input(random(&mut rng, &[3, 2, 2], 1.0))],
            dynamic_dicts: vec![g.input(random(&mut rng, &[3, 4], 1.0))],
        };
        let w = LossWeights { lambda_static: 0.0, ..Default::default() };
        let (_, b) = total_loss(&mut g, &out, &[&lb], &w).unwrap();
        assert_eq!(b.total, b.dynamic_loss(&w));
        let w = LossWeights { use_contrastive: false, ..Default::default() };
        let (_, b) = total_loss(&mut g, &out, &[&lb], &w).unwrap();
        assert_eq!(b.con, 0.0);
        assert!(b.intra >= 0.0);
    }

    proptest! {
        #[test]
        fn loss_ranges(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let lg = random(&mut rng, &[4, 3, 3], 3.0);
            let lb = random_labels(&mut rng, 3, 3, 4, 0.1);
            let ce = cross_entropy(&[&lg], &[&lb], 255).unwrap();
            let dice = dice_loss(&[&lg], &[&lb], 255).unwrap();
            prop_assert!(ce.value >= 0.0);
            prop_assert!((0.0..=1.0).contains(&dice.value));
        }

        #[test]
        fn breakdown_identity(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let mut g = Graph::new();
            let lb = random_labels(&mut rng, 2, 3, 3, 0.1);
            let out = BranchOutputs {
                static_logits: vec![g.input(random(&mut rng, &[3, 2, 3], 2.0))],
                dynamic_logits: vec![g.input(random(&mut rng, &[3, 2, 3], 2.0))],
                dynamic_dicts: vec![g.input(random(&mut rng, &[3, 4], 1.0))],
            };
            let (node, b) = total_loss(&mut g, &out, &[&lb], &LossWeights::default()).unwrap();
            prop_assert_eq!(g.scalar_value(node).unwrap(), b.total);
            prop_assert_eq!(b.total, 0.4 * (b.ce_static + b.dice_static) + 1.0 * (b.ce_dynamic + b.dice_dynamic + b.con));
        }
    }
}
