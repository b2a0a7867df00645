//! The assembled segmentation network: encoder, dictionaries, decoder.

use alloc::format;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::data::LabelMap;
use crate::decoder::{DecodeOutput, Decoder, DecoderConfig, StageTrace};
use crate::dictionary::{Modulator, StaticDictionary};
use crate::encoder::{Encoder, EncoderConfig, PYRAMID_LEVELS, SPATIAL_DIVISOR};
use crate::losses::{total_loss, BranchOutputs, LossBreakdown, LossWeights};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub base_channels: usize,
    /// Shared embedding width `C′`.
    pub embed_dim: usize,
    /// Interaction stages `L`.
    pub stages: usize,
    /// Candidates per class in the modulator.
    pub reduction: usize,
    pub residual: bool,
    pub use_modulator: bool,
    pub use_aggregator: bool,
    pub use_interaction: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            base_channels: 8,
            embed_dim: 32,
            stages: 3,
            reduction: 4,
            residual: false,
            use_modulator: true,
            use_aggregator: true,
            use_interaction: true,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration exercised end to end: `N = 3`, `C′ = 8`,
    /// `L = 2`.
    pub fn tiny() -> Self {
        Self { n_classes: 3, base_channels: 4, embed_dim: 8, stages: 2, ..Self::default() }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { base_channels: self.base_channels, embed_dim: self.embed_dim }
    }

    pub fn decoder(&self) -> DecoderConfig {
        let mut d = DecoderConfig::new(self.stages, self.embed_dim);
        d.residual = self.residual;
        d.interaction = self.use_interaction;
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 1 || self.n_classes > 255 {
            return Err(Error::Config(format!("n_classes must lie in 1..=255, got {}", self.n_classes)));
        }
        self.encoder().validate()?;
        self.decoder().validate()?;
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which decodes a forward pass runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    /// Training: the dynamic branch plus the static branch.
    Both,
    /// Inference: the dynamic branch alone.
    DynamicOnly,
}

#[derive(Debug, Clone)]
pub struct SampleForward {
    pub dynamic: DecodeOutput,
    pub static_branch: Option<DecodeOutput>,
    /// Modulator attention `N×r`, absent with the modulator disabled.
    pub attention: Option<Var>,
    pub aggregated: Var,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub samples: Vec<SampleForward>,
}

impl BatchForward {
    pub fn branch_outputs(&self) -> BranchOutputs {
        BranchOutputs {
            static_logits: self.samples.iter().filter_map(|s| s.static_branch.as_ref().map(|d| d.logits)).collect(),
            dynamic_logits: self.samples.iter().map(|s| s.dynamic.logits).collect(),
            dynamic_dicts: self.samples.iter().map(|s| s.dynamic.final_dictionary()).collect(),
        }
    }

    /// Per-sample `D_0..D_L` and `E_0..E_L` of the dynamic branch.
    pub fn traces(&self, g: &Graph) -> Vec<StageTrace> {
        self.samples.iter().map(|s| s.dynamic.trace(g)).collect()
    }
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    encoder: Encoder,
    dictionary: StaticDictionary,
    modulator: Modulator,
    decoder: Decoder,
    static_decodes: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            dictionary: self.dictionary,
            modulator: self.modulator.clone(),
            decoder: self.decoder.clone(),
            static_decodes: AtomicUsize::new(self.static_decode_count()),
        }
    }
}

impl Model {
    /// Registers every parameter in `store` in a fixed order and draws the
    /// initial values from `rng`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder(), store, rng)?;
        let dictionary = StaticDictionary::new(store, rng, config.n_classes, config.embed_dim)?;
        let modulator = Modulator::new(
            store,
            rng,
            config.n_classes,
            config.embed_dim,
            config.encoder().level_channels(PYRAMID_LEVELS),
            config.reduction,
        )?;
        let decoder = Decoder::new(config.decoder(), config.embed_dim, store, rng)?;
        Ok(Self { config, encoder, dictionary, modulator, decoder, static_decodes: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn dictionary(&self) -> &StaticDictionary {
        &self.dictionary
    }

    pub fn modulator(&self) -> &Modulator {
        &self.modulator
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Number of static-branch decodes run so far.
    pub fn static_decode_count(&self) -> usize {
        self.static_decodes.load(Ordering::Relaxed)
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(SPATIAL_DIVISOR) || !s[2].is_multiple_of(SPATIAL_DIVISOR) || s[1] == 0 || s[2] == 0
        {
            return Err(Error::Data(format!(
                "input image must be 3xHxW with H and W divisible by {SPATIAL_DIVISOR}, got {s:?}"
            )));
        }
        Ok(())
    }

    pub fn forward_sample(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
        branches: Branches,
    ) -> Result<SampleForward> {
        self.check_input(image)?;
        let x = g.input(image.clone());
        let enc = self.encoder.forward(g, store, x, self.config.use_aggregator)?;
        let d_s = self.dictionary.var(g, store);
        let (d0, attention) = if self.config.use_modulator {
            let a = self.modulator.attention_map(g, store, enc.deepest)?;
            (self.modulator.modulate(g, store, d_s, a)?, Some(a))
        } else {
            (d_s, None)
        };
        let dynamic = self.decoder.decode(g, store, d0, enc.aggregated)?;
        let static_branch = match branches {
            Branches::Both => {
                self.static_decodes.fetch_add(1, Ordering::Relaxed);
                Some(self.decoder.decode(g, store, d_s, enc.aggregated)?)
            }
            Branches::DynamicOnly => None,
        };
        Ok(SampleForward { dynamic, static_branch, attention, aggregated: enc.aggregated })
    }

    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&Tensor],
        branches: Branches,
    ) -> Result<BatchForward> {
        let samples = images.iter().map(|im| self.forward_sample(g, store, im, branches)).collect::<Result<_>>()?;
        Ok(BatchForward { samples })
    }

    /// Training forward followed by the total loss node.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[&Tensor],
        labels: &[&LabelMap],
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown, BatchForward)> {
        let branches = if weights.lambda_static > 0.0 { Branches::Both } else { Branches::DynamicOnly };
        let fwd = self.forward_batch(g, store, images, branches)?;
        let (node, breakdown) = total_loss(g, &fwd.branch_outputs(), labels, weights)?;
        Ok((node, breakdown, fwd))
    }

    /// Dynamic-branch class map, ties resolved toward the lower index.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<LabelMap> {
        let mut g = Graph::new();
        let out = self.forward_sample(&mut g, store, image, Branches::DynamicOnly)?;
        argmax_classes(g.value(out.dynamic.logits))
    }
}

/// Per-pixel argmax over the class axis of `N×H×W` logits; the lowest
/// index wins ties.
pub fn argmax_classes(logits: &Tensor) -> Result<LabelMap> {
    let (n, h, w) = logits.dims3("argmax")?;
    let p = h * w;
    let x = logits.data();
    let data = (0..p)
        .map(|i| {
            let mut best = 0;
            for c in 1..n {
                if x[c * p + i] > x[best * p + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn image(seed: u64, s: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![3, s, s], (0..3 * s * s).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn forward_shapes_and_static_counter() {
        let mut store = ParamStore::new();
        let model = Model::new(ModelConfig::tiny(), &mut store, &mut Rng::new(1)).unwrap();
        let img = image(2, 32);
        let mut g = Graph::new();
        let out = model.forward_sample(&mut g, &store, &img, Branches::Both).unwrap();
        assert_eq!(g.value(out.dynamic.logits).shape(), &[3, 32, 32]);
        assert_eq!(out.dynamic.dictionaries.len(), 3);
        assert_eq!(model.static_decode_count(), 1);
        model.predict(&store, &img).unwrap();
        assert_eq!(model.static_decode_count(), 1);
    }

    #[test]
    fn ablation_switches_change_wiring() {
        let img = image(3, 32);
        for (m, a, i) in [(false, true, true), (true, false, true), (true, true, false)] {
            let cfg = ModelConfig { use_modulator: m, use_aggregator: a, use_interaction: i, ..ModelConfig::tiny() };
            let mut store = ParamStore::new();
            let model = Model::new(cfg, &mut store, &mut Rng::new(4)).unwrap();
            let mut g = Graph::new();
            let out = model.forward_sample(&mut g, &store, &img, Branches::DynamicOnly).unwrap();
            assert_eq!(out.attention.is_some(), m);
            assert_eq!(out.dynamic.stages.len(), if i { 2 } else { 0 });
            if !m {
                assert_eq!(g.value(out.dynamic.dictionaries[0]), store.value(model.dictionary().embeddings));
            }
        }
    }

    #[test]
    fn argmax_prefers_lower_index() {
        let t = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&t).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn bad_inputs() {
        let mut store = ParamStore::new();
        let model = Model::new(ModelConfig::tiny(), &mut store, &mut Rng::new(1)).unwrap();
        assert!(matches!(model.predict(&store, &image(1, 24)), Err(Error::Data(_))));
        let cfg = ModelConfig { stages: 0, ..ModelConfig::tiny() };
        assert!(matches!(Model::new(cfg, &mut ParamStore::new(), &mut Rng::new(1)), Err(Error::Config(_))));
    }
}
