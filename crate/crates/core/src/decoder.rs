//! Alternating dictionary/feature cross-attention and the segmentation head.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::Linear;
use crate::numerics::{math, Graph, ParamStore, Rng, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    /// Number of interaction stages `L`.
    pub stages: usize,
    /// Attention temperature `√d_k`; defaults to the embedding width.
    pub d_k: f64,
    /// Adds the stage input back onto both updates.
    pub residual: bool,
    /// When false the stages are skipped and `(D_0, E_0)` go straight to
    /// the head.
    pub interaction: bool,
}

impl DecoderConfig {
    pub fn new(stages: usize, embed_dim: usize) -> Self {
        Self { stages, d_k: embed_dim as f64, residual: false, interaction: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("decoder needs at least one stage (L >= 1)".into()));
        }
        if !(self.d_k > 0.0) {
            return Err(Error::Config(format!("d_k must be positive, got {}", self.d_k)));
        }
        Ok(())
    }

    /// Stages actually executed.
    pub fn effective_stages(&self) -> usize {
        if self.interaction {
            self.stages
        } else {
            0
        }
    }
}

/// Nodes produced by one interaction stage.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub dictionary: Var,
    /// `C′×H′×W′`.
    pub features: Var,
    /// `N×P` weights of each class over pixels.
    pub dict_attention: Var,
    /// `N×P` weights of each pixel over classes, one distribution per
    /// column.
    pub feature_attention: Var,
}

/// One round of "dictionary queries features, then features query the
/// updated dictionary". Pixels are flattened row-major.
pub fn stage(g: &mut Graph, d_prev: Var, e_prev: Var, d_k: f64, residual: bool) -> Result<StageVars> {
    let (n, width) = g.value(d_prev).dims2("decoder stage")?;
    let (c, h, w) = g.value(e_prev).dims3("decoder stage")?;
    if c != width {
        return Err(Error::shapes("decoder stage", g.value(d_prev).shape(), g.value(e_prev).shape()));
    }
    if !(d_k > 0.0) {
        return Err(Error::Config(format!("d_k must be positive, got {d_k}")));
    }
    let inv = 1.0 / math::sqrt(d_k);
    let e = g.reshape(e_prev, &[c, h * w])?;

    let scores = g.matmul(d_prev, e)?;
    let scores = g.scale(scores, inv);
    let dict_attention = g.softmax_rows(scores)?;
    let mut dictionary = g.matmul_nt(dict_attention, e)?;
    if residual {
        dictionary = g.add(dictionary, d_prev)?;
    }

    // Kept class-major so every product runs along the pixel axis.
    let scores = g.matmul(dictionary, e)?;
    let scores = g.scale(scores, inv);
    let feature_attention = g.softmax_cols(scores)?;
    let dict_t = g.transpose(dictionary)?;
    let cols = g.matmul(dict_t, feature_attention)?;
    let mut features = g.reshape(cols, &[c, h, w])?;
    if residual {
        features = g.add(features, e_prev)?;
    }
    debug_assert_eq!(g.value(dictionary).shape(), &[n, width]);
    Ok(StageVars { dictionary, features, dict_attention, feature_attention })
}

/// Tensor-level wrapper of [`stage`].
pub fn stage_tensors(d_prev: &Tensor, e_prev: &Tensor, d_k: f64) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let d = g.input(d_prev.clone());
    let e = g.input(e_prev.clone());
    let s = stage(&mut g, d, e, d_k, false)?;
    Ok((g.value(s.dictionary).clone(), g.value(s.features).clone()))
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `N×H×W` with `H = 2H′`, `W = 2W′`.
    pub logits: Var,
    /// `D_0..D_L`.
    pub dictionaries: Vec<Var>,
    /// `E_0..E_L`.
    pub features: Vec<Var>,
    pub stages: Vec<StageVars>,
}

impl DecodeOutput {
    pub fn final_dictionary(&self) -> Var {
        *self.dictionaries.last().expect("trace holds D_0")
    }

    pub fn trace(&self, g: &Graph) -> StageTrace {
        StageTrace {
            dictionaries: self.dictionaries.iter().map(|&v| g.value(v).clone()).collect(),
            features: self.features.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }
}

/// Values of every `D_l` and `E_l` of one decode.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub dictionaries: Vec<Tensor>,
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    head: Linear,
}

impl Decoder {
    pub fn new(config: DecoderConfig, embed_dim: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let head = Linear::new(store, rng, "decoder.head", embed_dim, embed_dim)?;
        Ok(Self { config, head })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    /// Runs the stages, upsamples `E_L` ×2 and scores every pixel against
    /// `head(D_L)`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, d0: Var, e0: Var) -> Result<DecodeOutput> {
        self.config.validate()?;
        let mut dictionaries = Vec::with_capacity(self.config.stages + 1);
        let mut features = Vec::with_capacity(self.config.stages + 1);
        let mut stages = Vec::with_capacity(self.config.stages);
        dictionaries.push(d0);
        features.push(e0);
        let (mut d, mut e) = (d0, e0);
        for _ in 0..self.config.effective_stages() {
            let s = stage(g, d, e, self.config.d_k, self.config.residual)?;
            d = s.dictionary;
            e = s.features;
            dictionaries.push(d);
            features.push(e);
            stages.push(s);
        }
        let (c, h, w) = g.value(e).dims3("decode")?;
        let n = g.value(d).shape()[0];
        // The head is per-pixel linear, so scoring before the upsample
        // gives the same logits on a quarter of the pixels.
        let flat = g.reshape(e, &[c, h * w])?;
        let classes = self.head.forward(g, store, d)?;
        let scores = g.matmul(classes, flat)?;
        let scores = g.reshape(scores, &[n, h, w])?;
        let logits = g.interpolate(scores, 2 * h, 2 * w)?;
        Ok(DecodeOutput { logits, dictionaries, features, stages })
    }
}
