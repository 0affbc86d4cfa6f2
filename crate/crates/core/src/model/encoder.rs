//! Four-stage convolutional encoder with skip taps.
//!
//! Structure per stage: a patchify stem (4x4 stride-4 conv, then LN) in
//! front of stage 1, separate downsampling layers (LN, then 2x2 stride-2
//! conv) between stages, and shape-preserving blocks inside each stage:
//! depthwise 7x7 -> LN -> 1x1 expand (x4) -> GELU -> 1x1 project -> residual
//! add. Channel counts strictly increase along the stages.
//!
//! Every block output (residual tap) and every stem/downsample output
//! (non-residual tap) is recorded in a [`SkipBundle`] in production order;
//! the decoder consumes them in reverse. The classifier feature vector is
//! the global average pool of the stage-4 output followed by a LN.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{
    Activation, ActivationCache, DepthwiseConv, DepthwiseConvCache, LayerNorm, LayerNormCache,
    Param, PatchConv, PatchConvCache, PointwiseConv, PointwiseConvCache,
};
use crate::tensor::{FeatureMap, FeatureVector, ImageTensor};

/// Architecture hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub dw_kernel: usize,
    pub expansion: usize,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl EncoderConfig {
    /// Desk-scale variant small enough for tests and single-core training.
    pub fn micro() -> Self {
        Self {
            stage_depths: [1, 1, 3, 1],
            stage_widths: [32, 64, 128, 256],
            dw_kernel: 7,
            expansion: 4,
            patch_size: 4,
        }
    }

    /// The Base-scale variant: depths (3,3,27,3), widths (128,256,512,1024).
    pub fn base() -> Self {
        Self {
            stage_depths: [3, 3, 27, 3],
            stage_widths: [128, 256, 512, 1024],
            dw_kernel: 7,
            expansion: 4,
            patch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("stage depths must be positive".into()));
        }
        if !self.stage_widths.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "stage widths must strictly increase, got {:?}",
                self.stage_widths
            )));
        }
        if self.dw_kernel % 2 == 0 || self.dw_kernel == 0 {
            return Err(Error::Config("depthwise kernel must be odd".into()));
        }
        if self.expansion == 0 || self.patch_size == 0 {
            return Err(Error::Config("expansion and patch size must be positive".into()));
        }
        Ok(())
    }

    /// Number of skip taps produced per forward pass: one per block plus the
    /// stem and the three downsample outputs.
    pub fn skip_count(&self) -> usize {
        self.stage_depths.iter().sum::<usize>() + 4
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stage_widths[3]
    }

    /// Smallest legal input side: the stem divides by `patch_size` and the
    /// three downsamples each divide by 2.
    pub fn min_resolution(&self) -> usize {
        self.patch_size * 8
    }
}

/// Skip taps are either block outputs (carrying the residual path) or
/// stem/downsample outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipKind {
    Residual,
    NonResidual,
}

/// One recorded feature map, tagged with its encoder stage (1-4).
#[derive(Debug, Clone)]
pub struct SkipTap {
    pub stage: usize,
    pub kind: SkipKind,
    pub map: FeatureMap,
}

/// Skip taps in exact production order.
#[derive(Debug, Clone, Default)]
pub struct SkipBundle {
    taps: Vec<SkipTap>,
}

impl SkipBundle {
    /// Assemble a bundle from taps already in production order.
    pub fn from_taps(taps: Vec<SkipTap>) -> Self {
        Self { taps }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn taps(&self) -> &[SkipTap] {
        &self.taps
    }

    /// The stage-4 output map (always the last tap produced).
    pub fn stage4_output(&self) -> &FeatureMap {
        &self.taps.last().expect("bundle is non-empty").map
    }

    fn push(&mut self, stage: usize, kind: SkipKind, map: FeatureMap) {
        self.taps.push(SkipTap { stage, kind, map });
    }
}

/// One shape-preserving encoder block.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub dw: DepthwiseConv,
    pub norm: LayerNorm,
    pub expand: PointwiseConv,
    pub project: PointwiseConv,
}

pub struct BlockCache {
    dw: DepthwiseConvCache,
    norm: LayerNormCache,
    expand: PointwiseConvCache,
    gelu: ActivationCache,
    project: PointwiseConvCache,
}

impl ConvNextBlock {
    pub fn new<R: Rng>(width: usize, dw_kernel: usize, expansion: usize, rng: &mut R) -> Self {
        Self {
            dw: DepthwiseConv::new(dw_kernel, width, rng),
            norm: LayerNorm::new(width),
            expand: PointwiseConv::new(width, width * expansion, rng),
            project: PointwiseConv::new(width * expansion, width, rng),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, BlockCache) {
        let (d, dw) = self.dw.forward(x);
        let (n, norm) = self.norm.forward_map(&d);
        let (e, expand) = self.expand.forward(&n);
        let (g, gelu) = Activation::Gelu.forward_map(&e);
        let (p, project) = self.project.forward(&g);
        let y = &p + x;
        (y, BlockCache { dw, norm, expand, gelu, project })
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &FeatureMap) -> FeatureMap {
        let dg = self.project.backward(&cache.project, dy);
        let de = Activation::Gelu.backward_map(&cache.gelu, &dg);
        let dn = self.expand.backward(&cache.expand, &de);
        let dd = self.norm.backward_map(&cache.norm, &dn);
        let mut dx = self.dw.backward(&cache.dw, &dd);
        dx += dy; // residual path
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.dw.visit(&format!("{prefix}.dw"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.project.visit(&format!("{prefix}.project"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.dw.visit_mut(&format!("{prefix}.dw"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.expand.visit_mut(&format!("{prefix}.expand"), f);
        self.project.visit_mut(&format!("{prefix}.project"), f);
    }
}

/// Between-stage downsampling: LN, then a 2x2 stride-2 convolution.
#[derive(Debug, Clone)]
struct Downsample {
    norm: LayerNorm,
    conv: PatchConv,
}

struct DownsampleCache {
    norm: LayerNormCache,
    conv: PatchConvCache,
}

impl Downsample {
    fn new<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(c_in),
            conv: PatchConv::new(2, c_in, c_out, rng),
        }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, DownsampleCache) {
        let (n, norm) = self.norm.forward_map(x);
        let (y, conv) = self.conv.forward(&n);
        (y, DownsampleCache { norm, conv })
    }

    fn backward(&mut self, cache: &DownsampleCache, dy: &FeatureMap) -> FeatureMap {
        let dn = self.conv.backward(&cache.conv, dy);
        self.norm.backward_map(&cache.norm, &dn)
    }
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    stem_conv: PatchConv,
    stem_norm: LayerNorm,
    stages: Vec<Vec<ConvNextBlock>>,
    downsamples: Vec<Downsample>,
    final_norm: LayerNorm,
}

pub struct EncoderCache {
    stem_conv: PatchConvCache,
    stem_norm: LayerNormCache,
    blocks: Vec<Vec<BlockCache>>,
    downsamples: Vec<DownsampleCache>,
    final_norm: LayerNormCache,
    stage4_dim: (usize, usize, usize),
}

impl Encoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.stage_widths;
        let stem_conv = PatchConv::new(cfg.patch_size, 3, w[0], rng);
        let stem_norm = LayerNorm::new(w[0]);
        let mut stages = Vec::with_capacity(4);
        let mut downsamples = Vec::with_capacity(3);
        for s in 0..4 {
            if s > 0 {
                downsamples.push(Downsample::new(w[s - 1], w[s], rng));
            }
            let blocks = (0..cfg.stage_depths[s])
                .map(|_| ConvNextBlock::new(w[s], cfg.dw_kernel, cfg.expansion, rng))
                .collect();
            stages.push(blocks);
        }
        let final_norm = LayerNorm::new(w[3]);
        Ok(Self { cfg, stem_conv, stem_norm, stages, downsamples, final_norm })
    }

    /// Forward pass: returns the pooled feature vector, all skip taps in
    /// production order, and the cache for [`Encoder::backward`].
    pub fn encode(&self, x: &ImageTensor) -> Result<(FeatureVector, SkipBundle, EncoderCache)> {
        let (h, w, c) = x.dim();
        let div = self.cfg.min_resolution();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by {div} (patchify stride times three downsamples)"
            )));
        }

        let mut bundle = SkipBundle::default();
        let (s, stem_conv) = self.stem_conv.forward(x);
        let (mut cur, stem_norm) = self.stem_norm.forward_map(&s);
        bundle.push(1, SkipKind::NonResidual, cur.clone());

        let mut blocks = Vec::with_capacity(4);
        let mut downsamples = Vec::with_capacity(3);
        for stage in 0..4 {
            if stage > 0 {
                let (y, cache) = self.downsamples[stage - 1].forward(&cur);
                downsamples.push(cache);
                cur = y;
                bundle.push(stage + 1, SkipKind::NonResidual, cur.clone());
            }
            let mut stage_caches = Vec::with_capacity(self.stages[stage].len());
            for block in &self.stages[stage] {
                let (y, cache) = block.forward(&cur);
                stage_caches.push(cache);
                cur = y;
                bundle.push(stage + 1, SkipKind::Residual, cur.clone());
            }
            blocks.push(stage_caches);
        }

        let stage4_dim = cur.dim();
        let (sh, sw, sc) = stage4_dim;
        let mut pooled = FeatureVector::zeros(sc);
        for y in 0..sh {
            for xx in 0..sw {
                for ch in 0..sc {
                    pooled[ch] += cur[[y, xx, ch]];
                }
            }
        }
        pooled /= (sh * sw) as f64;
        let (feature, final_norm) = self.final_norm.forward_vec(&pooled);

        debug_assert_eq!(bundle.len(), self.cfg.skip_count());
        let cache = EncoderCache {
            stem_conv,
            stem_norm,
            blocks,
            downsamples,
            final_norm,
            stage4_dim,
        };
        Ok((feature, bundle, cache))
    }

    /// Backward pass. `d_feature` is the gradient w.r.t. the pooled feature
    /// vector; `d_taps` (production order, one per tap) carries gradients
    /// flowing back through the skip connections — `None` when no decoder
    /// ran. Accumulates parameter gradients; input gradients are not needed
    /// by any caller and are dropped at the stem.
    pub fn backward(
        &mut self,
        cache: &EncoderCache,
        d_feature: Option<&FeatureVector>,
        d_taps: Option<&[FeatureMap]>,
    ) {
        if let Some(taps) = d_taps {
            assert_eq!(taps.len(), self.cfg.skip_count(), "tap gradient count");
        }
        let (sh, sw, sc) = cache.stage4_dim;
        let mut cur: FeatureMap = Array3::zeros(cache.stage4_dim);
        if let Some(df) = d_feature {
            let d_pooled = self.final_norm.backward_vec(&cache.final_norm, df);
            let scale = 1.0 / (sh * sw) as f64;
            for y in 0..sh {
                for x in 0..sw {
                    for ch in 0..sc {
                        cur[[y, x, ch]] = d_pooled[ch] * scale;
                    }
                }
            }
        }

        let mut tap_cursor = self.cfg.skip_count();
        for stage in (0..4).rev() {
            for (block, bcache) in self.stages[stage]
                .iter_mut()
                .zip(&cache.blocks[stage])
                .rev()
            {
                if let Some(taps) = d_taps {
                    tap_cursor -= 1;
                    cur += &taps[tap_cursor];
                }
                cur = block.backward(bcache, &cur);
            }
            // Gradient w.r.t. the stem/downsample output feeding this stage.
            if let Some(taps) = d_taps {
                tap_cursor -= 1;
                cur += &taps[tap_cursor];
            }
            if stage > 0 {
                cur = self.downsamples[stage - 1].backward(&cache.downsamples[stage - 1], &cur);
            }
        }
        if d_taps.is_some() {
            assert_eq!(tap_cursor, 0, "all tap gradients consumed");
        }

        // Stem: LN backward then conv parameter grads; input grad discarded.
        let ds = self.stem_norm.backward_map(&cache.stem_norm, &cur);
        let _ = self.stem_conv.backward(&cache.stem_conv, &ds);
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.stem_conv.visit(&format!("{prefix}.stem.conv"), f);
        self.stem_norm.visit(&format!("{prefix}.stem.norm"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                let d = &self.downsamples[s - 1];
                d.norm.visit(&format!("{prefix}.down{s}.norm"), f);
                d.conv.visit(&format!("{prefix}.down{s}.conv"), f);
            }
            for (b, block) in stage.iter().enumerate() {
                block.visit(&format!("{prefix}.stage{}.block{b}", s + 1), f);
            }
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem_conv.visit_mut(&format!("{prefix}.stem.conv"), f);
        self.stem_norm.visit_mut(&format!("{prefix}.stem.norm"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            if s > 0 {
                let d = &mut self.downsamples[s - 1];
                d.norm.visit_mut(&format!("{prefix}.down{s}.norm"), f);
                d.conv.visit_mut(&format!("{prefix}.down{s}.conv"), f);
            }
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("{prefix}.stage{}.block{b}", s + 1), f);
            }
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
    }
}
