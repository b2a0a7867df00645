//! Convolutional backbone and the pyramid aggregator.
//!
//! Stage `i` (1-based) halves the resolution and outputs `C·2^i` channels:
//! a stride-2 3×3 convolution, GELU, then a stride-1 3×3 convolution. Each
//! level is projected per pixel to `C′` channels and resized to the level-1
//! grid; the four results are concatenated and fused back to `C′`.

use alloc::format;
use alloc::vec::Vec;

use crate::nn::{Conv2d, Linear};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::{Error, Result};

pub const PYRAMID_LEVELS: usize = 4;
/// Input height and width must be multiples of this.
pub const SPATIAL_DIVISOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// `C`: level `i` carries `C·2^i` channels.
    pub base_channels: usize,
    /// `C′`: width of the aggregated map and of every class embedding.
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { base_channels: 8, embed_dim: 32 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels must be >= 4, got {}", self.base_channels)));
        }
        if self.embed_dim < 8 {
            return Err(Error::Config(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        Ok(())
    }

    /// Channel count of pyramid level `level` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Pyramid levels `F_1..F_4`, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; PYRAMID_LEVELS],
}

/// What the encoder hands to the rest of the model.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub pyramid: FeaturePyramid,
    /// Aggregated map `E_0`, `C′ × H/2 × W/2`.
    pub aggregated: Var,
    /// Deepest level `F_4`, input of the modulator.
    pub deepest: Var,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
    maps: Vec<Linear>,
    fusion: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(PYRAMID_LEVELS);
        let mut cin = 3;
        for level in 1..=PYRAMID_LEVELS {
            let cout = config.level_channels(level);
            let down = Conv2d::new(store, rng, &format!("encoder.stage{level}.down"), cin, cout, 3, 2)?;
            let refine = Conv2d::new(store, rng, &format!("encoder.stage{level}.refine"), cout, cout, 3, 1)?;
            stages.push(Stage { down, refine });
            cin = cout;
        }
        let maps = (1..=PYRAMID_LEVELS)
            .map(|level| {
                Linear::new(store, rng, &format!("aggregator.map{level}"), config.level_channels(level), config.embed_dim)
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = Linear::new(store, rng, "aggregator.fusion", PYRAMID_LEVELS * config.embed_dim, config.embed_dim)?;
        Ok(Self { config, stages, maps, fusion })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fusion(&self) -> &Linear {
        &self.fusion
    }

    /// Per-level projection `C_i → C′` (level is 1-based).
    pub fn level_map(&self, level: usize) -> &Linear {
        &self.maps[level - 1]
    }

    /// Backbone: image `3×H×W` to the four-level pyramid.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<FeaturePyramid> {
        let (c, h, w) = g.value(image).dims3("encode")?;
        if c != 3 {
            return Err(Error::dim("encode", format!("expected 3 input channels, got {c}")));
        }
        if h % SPATIAL_DIVISOR != 0 || w % SPATIAL_DIVISOR != 0 {
            return Err(Error::dim(
                "encode",
                format!("input {h}x{w} is not divisible by the required divisor {SPATIAL_DIVISOR}"),
            ));
        }
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        let mut x = image;
        for stage in &self.stages {
            let down = stage.down.forward(g, store, x)?;
            let act = g.gelu(down);
            x = stage.refine.forward(g, store, act)?;
            levels.push(x);
        }
        Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
    }

    /// Projects level `level` (1-based) to `C′` channels and resizes it to
    /// `out_h × out_w`; resizing is skipped when the sizes already agree.
    pub fn map_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        f: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let projected = self.maps[level - 1].forward_pixels(g, store, f)?;
        let (_, h, w) = g.value(projected).dims3("map_level")?;
        if (h, w) == (out_h, out_w) {
            Ok(projected)
        } else {
            g.interpolate(projected, out_h, out_w)
        }
    }

    /// Channel concatenation of the mapped levels followed by the fusion
    /// projection `4C′ → C′`.
    pub fn aggregate(&self, g: &mut Graph, store: &ParamStore, mapped: &[Var]) -> Result<Var> {
        if mapped.len() != PYRAMID_LEVELS {
            return Err(Error::dim("aggregate", format!("expected {PYRAMID_LEVELS} maps, got {}", mapped.len())));
        }
        let first = g.value(mapped[0]).shape().to_vec();
        for &m in &mapped[1..] {
            if g.value(m).shape() != first.as_slice() {
                return Err(Error::shapes("aggregate", &first, g.value(m).shape()));
            }
        }
        let cat = g.concat_channels(mapped)?;
        self.fusion.forward_pixels(g, store, cat)
    }

    /// Full encoder. With `use_aggregator == false` the aggregated map is
    /// just the projected level 1 and the fusion layer is bypassed.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, use_aggregator: bool) -> Result<EncoderOutput> {
        let pyramid = self.encode(g, store, image)?;
        let (_, h1, w1) = g.value(pyramid.levels[0]).dims3("encoder")?;
        let aggregated = if use_aggregator {
            let mut mapped = Vec::with_capacity(PYRAMID_LEVELS);
            for (i, &f) in pyramid.levels.iter().enumerate() {
                mapped.push(self.map_level(g, store, i + 1, f, h1, w1)?);
            }
            self.aggregate(g, store, &mapped)?
        } else {
            self.map_level(g, store, 1, pyramid.levels[0], h1, w1)?
        };
        Ok(EncoderOutput { pyramid, aggregated, deepest: pyramid.levels[3] })
    }

    /// Evaluates the backbone on a tensor and returns the level values.
    pub fn encode_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let p = self.encode(&mut g, store, x)?;
        Ok(p.levels.iter().map(|&v| g.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients_with, Selection};
    use alloc::vec;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn build(c: usize, cp: usize, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let enc = Encoder::new(EncoderConfig { base_channels: c, embed_dim: cp }, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    /// Project each pixel with explicit loops, then resize with the
    /// scalar interpolation written out per output pixel.
    fn map_oracle(f: &Tensor, w: &Tensor, b: &Tensor, out_h: usize, out_w: usize) -> Tensor {
        let (cin, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let cout = w.shape()[0];
        let mut proj = Tensor::zeros(&[cout, h, wd]);
        for o in 0..cout {
            for y in 0..h {
                for x in 0..wd {
                    let mut s = b.data()[o];
                    for c in 0..cin {
                        s += w.get(&[o, c]) * f.get(&[c, y, x]);
                    }
                    proj.data_mut()[(o * h + y) * wd + x] = s;
                }
            }
        }
        let mut out = Tensor::zeros(&[cout, out_h, out_w]);
        for o in 0..cout {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let sy = if out_h > 1 { oy as f64 * (h - 1) as f64 / (out_h - 1) as f64 } else { 0.0 };
                    let sx = if out_w > 1 { ox as f64 * (wd - 1) as f64 / (out_w - 1) as f64 } else { 0.0 };
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(wd - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let v = (1.0 - fy) * ((1.0 - fx) * proj.get(&[o, y0, x0]) + fx * proj.get(&[o, y0, x1]))
                        + fy * ((1.0 - fx) * proj.get(&[o, y1, x0]) + fx * proj.get(&[o, y1, x1]));
                    out.data_mut()[(o * out_h + oy) * out_w + ox] = v;
                }
            }
        }
        out
    }

    #[test]
    fn pyramid_shapes_for_32x32() {
        let (enc, store) = build(4, 8, 1);
        let levels = enc.encode_tensor(&store, &image(2, 32, 32)).unwrap();
        let shapes: Vec<&[usize]> = levels.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[8, 16, 16][..], &[16, 8, 8], &[32, 4, 4], &[64, 2, 2]]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let (enc, store) = build(4, 8, 1);
        let err = enc.encode_tensor(&store, &image(2, 24, 32)).unwrap_err();
        assert!(alloc::format!("{err}").contains("16"));
    }

    #[test]
    fn rejects_small_configs() {
        assert!(EncoderConfig { base_channels: 3, embed_dim: 8 }.validate().is_err());
        assert!(EncoderConfig { base_channels: 4, embed_dim: 4 }.validate().is_err());
    }

    #[test]
    fn zero_weights_and_image_give_zero_pyramid() {
        let (enc, mut store) = build(4, 8, 1);
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let levels = enc.encode_tensor(&store, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert!(levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn encoding_replays_bitwise() {
        let (enc_a, store_a) = build(4, 8, 42);
        let (enc_b, store_b) = build(4, 8, 42);
        let img = image(42, 32, 32);
        assert_eq!(enc_a.encode_tensor(&store_a, &img).unwrap(), enc_b.encode_tensor(&store_b, &img).unwrap());
    }

    #[test]
    fn identity_projection_on_level_one_is_noop() {
        let (enc, mut store) = build(4, 8, 3);
        let map = *enc.level_map(1);
        store.set_value(map.weight, Tensor::identity(8)).unwrap();
        let mut rng = Rng::new(4);
        let f = random(&mut rng, &[8, 16, 16]);
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = enc.map_level(&mut g, &store, 1, x, 16, 16).unwrap();
        assert_eq!(g.value(y), &f);
    }

    #[test]
    fn constant_level_maps_to_constant() {
        let (enc, store) = build(4, 8, 3);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[64, 2, 2], 0.3));
        let y = enc.map_level(&mut g, &store, 4, x, 16, 16).unwrap();
        for ch in g.value(y).data().chunks(256) {
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-14));
        }
    }

    #[test]
    fn map_level_matches_loop_oracle() {
        let (enc, store) = build(4, 16, 5);
        let mut rng = Rng::new(6);
        let f = random(&mut rng, &[32, 4, 4]);
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let y = enc.map_level(&mut g, &store, 3, x, 16, 16).unwrap();
        let map = enc.level_map(3);
        let want = map_oracle(&f, store.value(map.weight), store.value(map.bias), 16, 16);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn aggregate_examples() {
        let (enc, mut store) = build(4, 8, 7);
        let fusion = *enc.fusion();
        let mut rng = Rng::new(8);
        let bias = random(&mut rng, &[8]);
        store.set_value(fusion.bias, bias.clone()).unwrap();

        let mut g = Graph::new();
        let zeros: Vec<Var> = (0..4).map(|_| g.input(Tensor::zeros(&[8, 4, 4]))).collect();
        let e0 = enc.aggregate(&mut g, &store, &zeros).unwrap();
        for (c, ch) in g.value(e0).data().chunks(16).enumerate() {
            assert!(ch.iter().all(|&v| v == bias.data()[c]));
        }

        // Selector weights [I | 0 | 0 | 0] with zero bias pick the first input.
        let mut sel = Tensor::zeros(&[8, 32]);
        for i in 0..8 {
            sel.data_mut()[i * 32 + i] = 1.0;
        }
        store.set_value(fusion.weight, sel).unwrap();
        store.set_value(fusion.bias, Tensor::zeros(&[8])).unwrap();
        let inputs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[8, 4, 4])).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let e0 = enc.aggregate(&mut g, &store, &vars).unwrap();
        assert_eq!(g.value(e0), &inputs[0]);
    }

    #[test]
    fn aggregate_matches_loop_oracle_and_checks_shapes() {
        let (enc, store) = build(4, 8, 9);
        let mut rng = Rng::new(10);
        let inputs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[8, 4, 4])).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let e0 = enc.aggregate(&mut g, &store, &vars).unwrap();
        let (w, b) = (store.value(enc.fusion().weight), store.value(enc.fusion().bias));
        for o in 0..8 {
            for p in 0..16 {
                let mut s = b.data()[o];
                for (i, t) in inputs.iter().enumerate() {
                    for c in 0..8 {
                        s += w.get(&[o, i * 8 + c]) * t.data()[c * 16 + p];
                    }
                }
                assert!((g.value(e0).data()[o * 16 + p] - s).abs() < 1e-12);
            }
        }
        let odd = g.input(Tensor::zeros(&[8, 2, 2]));
        assert!(enc.aggregate(&mut g, &store, &[vars[0], vars[1], vars[2], odd]).is_err());
    }

    #[test]
    fn e0_shape_contract_for_several_configs() {
        for &(c, cp, h, w) in &[(4, 8, 32, 32), (5, 12, 16, 48), (8, 16, 64, 32)] {
            let (enc, store) = build(c, cp, 11);
            let mut g = Graph::new();
            let x = g.input(image(12, h, w));
            let out = enc.forward(&mut g, &store, x, true).unwrap();
            assert_eq!(g.value(out.aggregated).shape(), &[cp, h / 2, w / 2]);
            assert_eq!(g.value(out.deepest).shape(), &[c * 16, h / 16, w / 16]);
        }
    }

    #[test]
    fn permuting_a_batch_permutes_outputs() {
        let (enc, store) = build(4, 8, 13);
        let imgs = [image(1, 16, 16), image(2, 16, 16), image(3, 16, 16)];
        let run = |order: &[usize]| -> Vec<Tensor> {
            let mut g = Graph::new();
            order
                .iter()
                .map(|&i| {
                    let x = g.input(imgs[i].clone());
                    let o = enc.forward(&mut g, &store, x, true).unwrap();
                    g.value(o.aggregated).clone()
                })
                .collect()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[2]);
        assert_eq!(a[2], b[0]);
    }

    #[test]
    fn encoder_gradients() {
        let (enc, mut store) = build(4, 8, 14);
        let img = image(15, 16, 16);
        let mut rng = Rng::new(16);
        let probe = random(&mut rng, &[8, 8, 8]);
        // The last two backbone tensors dominate the entry count; stride
        // through everything else fully.
        let ids: Vec<_> = store.iter().map(|(id, _)| id).filter(|id| store.value(*id).numel() < 10_000).collect();
        let r = check_gradients_with(&mut store, 1e-5, &Selection::Only(ids), |st, g| {
            let x = g.input(img.clone());
            let out = enc.forward(g, st, x, true)?;
            let v = g.value(out.aggregated).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
            g.custom_scalar(v, vec![out.aggregated], vec![probe.clone()])
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
