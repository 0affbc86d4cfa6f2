//! Mirrored multi-stage decoder reconstructing the input image from skip taps.
//!
//! Stages run 4 -> 1, consuming the [`SkipBundle`] in reverse production
//! order (LIFO). Each stage has one deconvolution block per skip produced by
//! the matching encoder stage (block count = encoder depth + 1); a block
//! merges its skip with the previous output by element-wise summation, then
//! applies a 1x1 deconvolution (kernel count = channel count), layer norm,
//! and the stage activation — LeakyReLU for stages 4/3/2, ELU for stage 1.
//! Stages 3, 2, 1 start with an upsampling layer (LN, then 2x2 stride-2
//! transposed conv); stage 4 starts directly from the encoder's stage-4
//! output map. A final 4x4 stride-4 transposed convolution with 3 kernels
//! and a sigmoid produces the reconstruction in (0, 1).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::encoder::{EncoderConfig, SkipBundle};
use crate::model::layers::{
    Activation, ActivationCache, LayerNorm, LayerNormCache, Param, PatchDeconv, PatchDeconvCache,
    PointwiseConv, PointwiseConvCache,
};
use crate::tensor::{FeatureMap, ImageTensor};

/// Decoder-specific knobs; the architecture itself mirrors the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Negative slope of the LeakyReLU used in stages 4, 3 and 2.
    pub leaky_slope: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { leaky_slope: 0.01 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 || self.leaky_slope >= 1.0 {
            return Err(Error::Config(format!(
                "leaky_slope must lie in [0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Sum the skip with the previous representation, then 1x1 deconv, LN and
/// the stage activation. Shapes are preserved throughout.
#[derive(Debug, Clone)]
pub struct DeconvBlock {
    pub conv: PointwiseConv,
    pub norm: LayerNorm,
    pub act: Activation,
}

pub struct DeconvBlockCache {
    conv: PointwiseConvCache,
    norm: LayerNormCache,
    act: ActivationCache,
}

impl DeconvBlock {
    pub fn new<R: Rng>(width: usize, act: Activation, rng: &mut R) -> Self {
        Self {
            conv: PointwiseConv::new(width, width, rng),
            norm: LayerNorm::new(width),
            act,
        }
    }

    pub fn forward(&self, skip: &FeatureMap, prev: &FeatureMap) -> (FeatureMap, DeconvBlockCache) {
        debug_assert_eq!(skip.dim(), prev.dim());
        let s = skip + prev;
        let (c, conv) = self.conv.forward(&s);
        let (n, norm) = self.norm.forward_map(&c);
        let (y, act) = self.act.forward_map(&n);
        (y, DeconvBlockCache { conv, norm, act })
    }

    /// Returns the gradient w.r.t. the summed input, which is also the
    /// gradient w.r.t. both `skip` and `prev`.
    pub fn backward(&mut self, cache: &DeconvBlockCache, dy: &FeatureMap) -> FeatureMap {
        let dn = self.act.backward_map(&cache.act, dy);
        let dc = self.norm.backward_map(&cache.norm, &dn);
        self.conv.backward(&cache.conv, &dc)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }
}

/// Stage-opening upsampler: LN, then 2x2 stride-2 transposed conv that
/// doubles the spatial dims and moves to the next stage's width.
#[derive(Debug, Clone)]
struct Upsample {
    norm: LayerNorm,
    deconv: PatchDeconv,
}

struct UpsampleCache {
    norm: LayerNormCache,
    deconv: PatchDeconvCache,
}

impl Upsample {
    fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(c_in),
            deconv: PatchDeconv::new(2, c_in, c_out, rng),
        }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, UpsampleCache) {
        let (n, norm) = self.norm.forward_map(x);
        let (y, deconv) = self.deconv.forward(&n);
        (y, UpsampleCache { norm, deconv })
    }

    fn backward(&mut self, cache: &UpsampleCache, dy: &FeatureMap) -> FeatureMap {
        let dn = self.deconv.backward(&cache.deconv, dy);
        self.norm.backward_map(&cache.norm, &dn)
    }
}

pub struct Decoder {
    pub enc_cfg: EncoderConfig,
    pub cfg: DecoderConfig,
    /// Deconv blocks in processing order: index 0 holds decoder stage 4.
    stages: Vec<Vec<DeconvBlock>>,
    /// Upsamplers in processing order: 4->3, 3->2, 2->1.
    upsamples: Vec<Upsample>,
    final_deconv: PatchDeconv,
}

pub struct DecoderCache {
    blocks: Vec<Vec<DeconvBlockCache>>,
    upsamples: Vec<UpsampleCache>,
    final_deconv: PatchDeconvCache,
    sigmoid: ActivationCache,
}

impl Decoder {
    pub fn new<R: Rng>(enc_cfg: &EncoderConfig, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        enc_cfg.validate()?;
        cfg.validate()?;
        let w = enc_cfg.stage_widths;
        let mut stages = Vec::with_capacity(4);
        let mut upsamples = Vec::with_capacity(3);
        // Stage s uses LeakyReLU for s in {4, 3, 2} and ELU for stage 1.
        for stage in (1..=4usize).rev() {
            if stage < 4 {
                upsamples.push(Upsample::new(w[stage], w[stage - 1], rng));
            }
            let act = if stage == 1 {
                Activation::Elu(1.0)
            } else {
                Activation::LeakyRelu(cfg.leaky_slope)
            };
            let blocks = (0..enc_cfg.stage_depths[stage - 1] + 1)
                .map(|_| DeconvBlock::new(w[stage - 1], act, rng))
                .collect();
            stages.push(blocks);
        }
        let final_deconv = PatchDeconv::new(enc_cfg.patch_size, w[0], 3, rng);
        Ok(Self { enc_cfg: enc_cfg.clone(), cfg, stages, upsamples, final_deconv })
    }

    /// Decoder stage number (4..1) for processing index 0..3.
    fn stage_no(idx: usize) -> usize {
        4 - idx
    }

    /// Reconstruct the clean image from the taps of one encoder pass.
    ///
    /// The seed of stage 4 is the encoder's stage-4 output map (the last
    /// tap); there is no upsample in front of stage 4. Every tap is consumed
    /// exactly once, in reverse production order.
    pub fn decode(&self, skips: &SkipBundle) -> Result<(ImageTensor, DecoderCache)> {
        let expected = self.enc_cfg.skip_count();
        if skips.len() != expected {
            return Err(Error::Config(format!(
                "skip bundle holds {} taps but the config produces {expected}",
                skips.len()
            )));
        }
        let taps = skips.taps();
        let mut consumed = vec![false; taps.len()];
        let mut cursor = taps.len();
        let mut prev = skips.stage4_output().clone();

        let mut blocks = Vec::with_capacity(4);
        let mut upsamples = Vec::with_capacity(3);
        for (idx, stage_blocks) in self.stages.iter().enumerate() {
            if idx > 0 {
                let (y, cache) = self.upsamples[idx - 1].forward(&prev);
                upsamples.push(cache);
                prev = y;
            }
            let mut stage_caches = Vec::with_capacity(stage_blocks.len());
            for (b, block) in stage_blocks.iter().enumerate() {
                cursor -= 1;
                assert!(!consumed[cursor], "tap {cursor} consumed twice");
                consumed[cursor] = true;
                let tap = &taps[cursor];
                if tap.map.dim() != prev.dim() {
                    return Err(Error::Config(format!(
                        "skip tap {cursor} (encoder stage {}, {:?}) has shape {:?} but decoder \
                         stage {} block {b} expects {:?}",
                        tap.stage,
                        tap.kind,
                        tap.map.dim(),
                        Self::stage_no(idx),
                        prev.dim()
                    )));
                }
                let (y, cache) = block.forward(&tap.map, &prev);
                stage_caches.push(cache);
                prev = y;
            }
            blocks.push(stage_caches);
        }
        assert_eq!(cursor, 0, "all taps consumed");
        assert!(consumed.iter().all(|&c| c), "unconsumed taps remain");

        let (pre, final_deconv) = self.final_deconv.forward(&prev);
        let (out, sigmoid) = Activation::Sigmoid.forward_map(&pre);
        Ok((out, DecoderCache { blocks, upsamples, final_deconv, sigmoid }))
    }

    /// Backward pass. Returns gradients w.r.t. every skip tap in production
    /// order; the gradient w.r.t. the stage-4 seed is folded into the last
    /// tap's entry (they are the same tensor).
    pub fn backward(&mut self, cache: &DecoderCache, d_out: &ImageTensor) -> Vec<FeatureMap> {
        let d_pre = Activation::Sigmoid.backward_map(&cache.sigmoid, d_out);
        let mut cur = self.final_deconv.backward(&cache.final_deconv, &d_pre);

        // Reverse of decode's consumption: taps were taken in descending
        // production order, so walking the blocks backwards emits ascending
        // tap gradients starting at 0.
        let mut tap_grads: Vec<FeatureMap> = Vec::with_capacity(self.enc_cfg.skip_count());
        for idx in (0..4).rev() {
            for (block, bcache) in self.stages[idx].iter_mut().zip(&cache.blocks[idx]).rev() {
                let ds = block.backward(bcache, &cur);
                tap_grads.push(ds.clone());
                cur = ds;
            }
            if idx > 0 {
                cur = self.upsamples[idx - 1].backward(&cache.upsamples[idx - 1], &cur);
            }
        }
        // `cur` is now the gradient w.r.t. the stage-4 seed.
        *tap_grads.last_mut().expect("at least one tap") += &cur;
        debug_assert_eq!(tap_grads.len(), self.enc_cfg.skip_count());
        tap_grads
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (idx, stage) in self.stages.iter().enumerate() {
            let s = Self::stage_no(idx);
            if idx > 0 {
                let u = &self.upsamples[idx - 1];
                u.norm.visit(&format!("{prefix}.up{s}.norm"), f);
                u.deconv.visit(&format!("{prefix}.up{s}.deconv"), f);
            }
            for (b, block) in stage.iter().enumerate() {
                block.visit(&format!("{prefix}.stage{s}.block{b}"), f);
            }
        }
        self.final_deconv.visit(&format!("{prefix}.final"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (idx, stage) in self.stages.iter_mut().enumerate() {
            let s = Self::stage_no(idx);
            if idx > 0 {
                let u = &mut self.upsamples[idx - 1];
                u.norm.visit_mut(&format!("{prefix}.up{s}.norm"), f);
                u.deconv.visit_mut(&format!("{prefix}.up{s}.deconv"), f);
            }
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}.stage{s}.block{b}"), f);
            }
        }
        self.final_deconv.visit_mut(&format!("{prefix}.final"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::Encoder;
    use crate::rng::stream;
    use ndarray::Array3;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            stage_depths: [1, 1, 2, 1],
            stage_widths: [4, 6, 8, 10],
            dw_kernel: 3,
            expansion: 2,
            patch_size: 4,
        }
    }

    fn rand_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = stream(seed, "dec-test", 0);
        ImageTensor::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
    }

    fn pair(seed: u64) -> (Encoder, Decoder) {
        let mut rng = stream(seed, "init", 0);
        let enc = Encoder::new(tiny_cfg(), &mut rng).unwrap();
        let dec = Decoder::new(&tiny_cfg(), DecoderConfig::default(), &mut rng).unwrap();
        (enc, dec)
    }

    #[test]
    fn reconstruction_round_trips_shape_and_range() {
        let (enc, dec) = pair(1);
        let x = rand_image(64, 32, 2);
        let (_, skips, _) = enc.encode(&x).unwrap();
        let (out, _) = dec.decode(&skips).unwrap();
        assert_eq!(out.dim(), x.dim());
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn micro_decoder_consumes_ten_taps() {
        let mut rng = stream(3, "init", 0);
        let enc = Encoder::new(EncoderConfig::micro(), &mut rng).unwrap();
        let mut dec = Decoder::new(&EncoderConfig::micro(), DecoderConfig::default(), &mut rng)
            .unwrap();
        let x = rand_image(32, 32, 4);
        let (_, skips, _) = enc.encode(&x).unwrap();
        assert_eq!(skips.len(), 10);
        let (out, cache) = dec.decode(&skips).unwrap();
        let tap_grads = dec.backward(&cache, &Array3::ones(out.dim()));
        assert_eq!(tap_grads.len(), 10);
        for (g, t) in tap_grads.iter().zip(skips.taps()) {
            assert_eq!(g.dim(), t.map.dim());
        }
    }

    #[test]
    fn undersized_bundle_is_rejected() {
        let (enc, dec) = pair(5);
        let bigger = EncoderConfig {
            stage_depths: [2, 1, 2, 1],
            ..tiny_cfg()
        };
        let mut rng = stream(6, "init", 0);
        let enc_big = Encoder::new(bigger, &mut rng).unwrap();
        let x = rand_image(32, 32, 7);
        let (_, skips_big, _) = enc_big.encode(&x).unwrap();
        assert!(matches!(dec.decode(&skips_big), Err(Error::Config(_))));
        let (_, skips, _) = enc.encode(&x).unwrap();
        assert!(dec.decode(&skips).is_ok());
    }

    #[test]
    fn opposite_inputs_match_zero_map() {
        let mut rng = stream(8, "init", 0);
        let block = DeconvBlock::new(5, Activation::LeakyRelu(0.01), &mut rng);
        let mut xrng = stream(9, "x", 0);
        let s = Array3::from_shape_fn((3, 3, 5), |_| xrng.random_range(-1.0..1.0));
        let neg = s.map(|v| -v);
        let zero = Array3::zeros((3, 3, 5));
        let (a, _) = block.forward(&s, &neg);
        let (b, _) = block.forward(&zero, &zero);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upsample_kernel_emits_zero() {
        let mut rng = stream(10, "init", 0);
        let mut up = Upsample::new(4, 2, &mut rng);
        for v in up.deconv.weight.values_mut() {
            *v = 0.0;
        }
        let x = Array3::from_shape_fn((2, 2, 4), |(i, j, k)| (i + j + k) as f64);
        let (y, _) = up.forward(&x);
        assert_eq!(y.dim(), (4, 4, 2));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    /// Hand-composed reference for one deconv block on a 2x2x4 pair.
    #[test]
    fn block_matches_straight_line_reference() {
        let mut rng = stream(11, "init", 0);
        let width = 4;
        let block = DeconvBlock::new(width, Activation::LeakyRelu(0.01), &mut rng);
        let mut xrng = stream(12, "x", 0);
        let skip = Array3::from_shape_fn((2, 2, width), |_| xrng.random_range(-1.0..1.0));
        let prev = Array3::from_shape_fn((2, 2, width), |_| xrng.random_range(-1.0..1.0));
        let (got, _) = block.forward(&skip, &prev);

        for y in 0..2 {
            for x in 0..2 {
                // element-wise sum, then 1x1 conv
                let mut conv = vec![0.0; width];
                for (j, c) in conv.iter_mut().enumerate() {
                    *c = block.conv.bias.value[[j]];
                    for i in 0..width {
                        *c += (skip[[y, x, i]] + prev[[y, x, i]])
                            * block.conv.weight.value[[i, j]];
                    }
                }
                // layer norm
                let mean: f64 = conv.iter().sum::<f64>() / width as f64;
                let var: f64 =
                    conv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                for (j, c) in conv.iter().enumerate() {
                    let n = (c - mean) / (var + 1e-6).sqrt() * block.norm.scale.value[[j]]
                        + block.norm.bias.value[[j]];
                    let expect = if n >= 0.0 { n } else { 0.01 * n };
                    assert!((got[[y, x, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    /// Gradients of a probe loss on the reconstruction, w.r.t. decoder
    /// parameters AND the skip taps (the path into the encoder), checked
    /// against finite differences.
    #[test]
    fn decoder_gradients_match_finite_differences() {
        let (enc, mut dec) = pair(13);
        let x = rand_image(32, 32, 14);
        let (_, skips, _) = enc.encode(&x).unwrap();
        let mut prng = stream(15, "probe", 0);
        let probe = Array3::from_shape_fn((32, 32, 3), |_| prng.random_range(-1.0..1.0));

        let (out, cache) = dec.decode(&skips).unwrap();
        let _ = out;
        let tap_grads = dec.backward(&cache, &probe);

        let eps = 1e-6;
        let loss = |dec: &Decoder, skips: &SkipBundle| -> f64 {
            let (o, _) = dec.decode(skips).unwrap();
            (&o * &probe).sum()
        };

        // Tap gradients: sample a few coordinates of every tap. The last tap
        // also feeds the decoder seed, exercising the fold-in path.
        let mut skips_var = skips.clone();
        let mut coord_rng = stream(16, "coords", 0);
        for t in 0..skips_var.len() {
            let n = skips_var.taps()[t].map.len();
            for _ in 0..3 {
                let i = coord_rng.random_range(0..n);
                let analytic = tap_grads[t].as_slice().unwrap()[i];
                let mutate = |b: &mut SkipBundle, v: f64| {
                    // Taps are only readable through the public API; tests
                    // may rebuild the bundle instead. Clone-and-patch here.
                    let mut taps: Vec<_> = b.taps().to_vec();
                    taps[t].map.as_slice_mut().unwrap()[i] = v;
                    *b = SkipBundle::from_taps(taps);
                };
                let saved = skips_var.taps()[t].map.as_slice().unwrap()[i];
                mutate(&mut skips_var, saved + eps);
                let up = loss(&dec, &skips_var);
                mutate(&mut skips_var, saved - eps);
                let down = loss(&dec, &skips_var);
                mutate(&mut skips_var, saved);
                let num = (up - down) / (2.0 * eps);
                let rel = (analytic - num).abs() / (analytic.abs() + num.abs()).max(1e-3);
                assert!(rel < 1e-4, "tap {t}[{i}]: {analytic} vs {num}");
            }
        }

        // Parameter gradients, a few coordinates per tensor.
        let mut entries = Vec::new();
        dec.visit("d", &mut |name, p| entries.push((name, p.len())));
        for (name, len) in entries {
            for _ in 0..2usize.min(len) {
                let i = coord_rng.random_range(0..len);
                let mut analytic = 0.0;
                dec.visit("d", &mut |n, p| {
                    if n == name {
                        analytic = p.grads()[i];
                    }
                });
                let mut saved = 0.0;
                dec.visit_mut("d", &mut |n, p| {
                    if n == name {
                        saved = p.values()[i];
                        p.values_mut()[i] = saved + eps;
                    }
                });
                let up = loss(&dec, &skips);
                dec.visit_mut("d", &mut |n, p| {
                    if n == name {
                        p.values_mut()[i] = saved - eps;
                    }
                });
                let down = loss(&dec, &skips);
                dec.visit_mut("d", &mut |n, p| {
                    if n == name {
                        p.values_mut()[i] = saved;
                    }
                });
                let num = (up - down) / (2.0 * eps);
                let rel = (analytic - num).abs() / (analytic.abs() + num.abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{i}]: {analytic} vs {num}");
            }
        }
    }
}
