//! Static class dictionary and the modulator that turns it into a
//! per-image dynamic dictionary.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::{normal_init, Linear};
use crate::numerics::{math, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::{Error, Result};

/// One learnable `C′`-vector per class index, shared by every image.
#[derive(Debug, Clone, Copy)]
pub struct StaticDictionary {
    pub embeddings: ParamId,
    pub n_classes: usize,
    pub width: usize,
}

impl StaticDictionary {
    /// Entries drawn i.i.d. from `N(0, 1/C′)`.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, n_classes: usize, width: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("dictionary needs at least one class".into()));
        }
        let std = 1.0 / math::sqrt(width as f64);
        let embeddings = store.add("dictionary.static", normal_init(rng, &[n_classes, width], std))?;
        Ok(Self { embeddings, n_classes, width })
    }

    pub fn var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.embeddings)
    }
}

/// Pooled channel attention over the deepest pyramid level.
///
/// The first half of the channels is average-pooled, the second half
/// max-pooled; each pooled vector goes through its own linear layer, the
/// two results are concatenated and fused into `N·r` logits, and a softmax
/// over the `r` axis gives each class a convex weighting of `r` candidate
/// embeddings expanded from its static entry.
#[derive(Debug, Clone)]
pub struct Modulator {
    expand: Linear,
    avg_branch: Linear,
    max_branch: Linear,
    fusion: Linear,
    n_classes: usize,
    reduction: usize,
    width: usize,
    deep_channels: usize,
}

impl Modulator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        n_classes: usize,
        width: usize,
        deep_channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("modulator reduction r must be >= 1".into()));
        }
        if !deep_channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "modulator splits the deepest level in two halves; {deep_channels} channels is odd"
            )));
        }
        let half = deep_channels / 2;
        let expand = Linear::new(store, rng, "modulator.expand", width, reduction * width)?;
        let avg_branch = Linear::new(store, rng, "modulator.avg", half, half)?;
        let max_branch = Linear::new(store, rng, "modulator.max", half, half)?;
        let fusion = Linear::new(store, rng, "modulator.fusion", deep_channels, n_classes * reduction)?;
        Ok(Self { expand, avg_branch, max_branch, fusion, n_classes, reduction, width, deep_channels })
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn expand(&self) -> &Linear {
        &self.expand
    }

    pub fn avg_branch(&self) -> &Linear {
        &self.avg_branch
    }

    pub fn max_branch(&self) -> &Linear {
        &self.max_branch
    }

    pub fn fusion(&self) -> &Linear {
        &self.fusion
    }

    /// `N×r` attention map from `F_4`; every row sums to one.
    pub fn attention_map(&self, g: &mut Graph, store: &ParamStore, deepest: Var) -> Result<Var> {
        let (c, _, _) = g.value(deepest).dims3("attention_map")?;
        if c != self.deep_channels {
            return Err(Error::dim(
                "attention_map",
                format!("expected {} channels, got {c}", self.deep_channels),
            ));
        }
        let half = c / 2;
        let first = g.slice_channels(deepest, 0, half)?;
        let second = g.slice_channels(deepest, half, c)?;
        let avg = g.avg_pool(first)?;
        let max = g.max_pool(second)?;
        let a_avg = self.avg_branch.forward(g, store, avg)?;
        let a_max = self.max_branch.forward(g, store, max)?;
        let joined = g.reshape(a_avg, &[half, 1, 1])?;
        let joined_max = g.reshape(a_max, &[half, 1, 1])?;
        let cat = g.concat_channels(&[joined, joined_max])?;
        let cat = g.reshape(cat, &[c])?;
        let logits = self.fusion.forward(g, store, cat)?;
        let logits = g.reshape(logits, &[self.n_classes, self.reduction])?;
        g.softmax_rows(logits)
    }

    /// `D_0[n] = Σ_k A[n,k] · expand(D_s[n])_k`.
    pub fn modulate(&self, g: &mut Graph, store: &ParamStore, static_dict: Var, attention: Var) -> Result<Var> {
        let (n, w) = g.value(static_dict).dims2("modulate")?;
        let (na, r) = g.value(attention).dims2("modulate")?;
        if n != na || r != self.reduction || w != self.width {
            return Err(Error::shapes("modulate", g.value(static_dict).shape(), g.value(attention).shape()));
        }
        let candidates = self.expand.forward(g, store, static_dict)?;
        g.mix_candidates(candidates, attention)
    }
}

/// Intra-class spread and inter-class separation of per-sample dictionaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceStats {
    /// Mean squared distance of each sample's embedding to its class center.
    pub intra: f64,
    /// Mean squared distance between distinct class centers.
    pub inter: f64,
    /// Set when `B < 2` (intra is then 0) or `N < 2` (inter is then 0).
    pub degenerate: bool,
}

/// `dicts[b]` is sample `b`'s `N×C′` dictionary.
pub fn dictionary_distance_stats(dicts: &[&Tensor]) -> Result<DistanceStats> {
    let (centers, n, w) = class_centers(dicts)?;
    let b = dicts.len();
    let mut intra = 0.0;
    for d in dicts {
        for (row, mu) in d.data().chunks(w).zip(centers.chunks(w)) {
            intra += row.iter().zip(mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>();
        }
    }
    intra /= (b * n) as f64;
    let mut inter = 0.0;
    if n > 1 {
        for i in 0..n {
            for j in i + 1..n {
                inter += sq_dist(&centers[i * w..(i + 1) * w], &centers[j * w..(j + 1) * w]);
            }
        }
        inter *= 2.0 / (n * (n - 1)) as f64;
    }
    Ok(DistanceStats { intra, inter, degenerate: b < 2 || n < 2 })
}

/// Per-class means over the batch, row-major `N×C′`.
pub(crate) fn class_centers(dicts: &[&Tensor]) -> Result<(Vec<f64>, usize, usize)> {
    let first = dicts.first().ok_or_else(|| Error::Contract("no dictionaries given".into()))?;
    let (n, w) = first.dims2("class_centers")?;
    if n == 0 {
        return Err(Error::Contract("dictionary with zero classes".into()));
    }
    let mut centers = alloc::vec![0.0; n * w];
    for d in dicts {
        if d.shape() != first.shape() {
            return Err(Error::shapes("class_centers", first.shape(), d.shape()));
        }
        for (c, v) in centers.iter_mut().zip(d.data()) {
            *c += v;
        }
    }
    let b = dicts.len() as f64;
    centers.iter_mut().for_each(|c| *c /= b);
    Ok((centers, n, w))
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
