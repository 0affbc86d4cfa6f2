//! View transformations and noise injection.
//!
//! [`similarity_transform`] produces the transformed view of an image from a
//! configured mix of geometric and intensity operations. Geometric operations
//! are composed into a single affine map and resampled once (bilinear, with
//! reflected borders); intensity operations follow and re-clamp to `[0, 1]`.
//! [`add_gaussian_noise`] draws i.i.d. element-wise noise and deliberately
//! does not clamp, since reconstructions are compared to clean targets.
//!
//! All operations are pure functions of `(input, config, rng state)`.

use ndarray::Zip;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Probability-gated range `[lo, hi]` for an intensity factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRange {
    pub min: f64,
    pub max: f64,
    pub probability: f64,
}

/// Configuration of the similarity-transformation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityTransformConfig {
    /// Rotation angle is drawn uniformly from `[-rotation_range, +rotation_range]` degrees.
    pub rotation_range: f64,
    /// Maximum horizontal shift as a fraction of the width.
    pub shift_horizontal: f64,
    /// Maximum vertical shift as a fraction of the height.
    pub shift_vertical: f64,
    pub shift_probability: f64,
    /// Scale factor range, applied about the image center.
    pub scale_min: f64,
    pub scale_max: f64,
    pub scale_probability: f64,
    pub flip_horizontal_probability: f64,
    pub flip_vertical_probability: f64,
    pub saturation: FactorRange,
    pub brightness: FactorRange,
}

impl Default for SimilarityTransformConfig {
    fn default() -> Self {
        Self {
            rotation_range: 120.0,
            shift_horizontal: 0.2,
            shift_vertical: 0.3,
            shift_probability: 0.7,
            scale_min: 0.8,
            scale_max: 0.9,
            scale_probability: 0.7,
            flip_horizontal_probability: 0.5,
            flip_vertical_probability: 0.5,
            saturation: FactorRange {
                min: 0.6,
                max: 2.6,
                probability: 0.6,
            },
            brightness: FactorRange {
                min: 0.6,
                max: 2.8,
                probability: 0.7,
            },
        }
    }
}

impl SimilarityTransformConfig {
    /// A configuration under which the transform is the exact identity.
    pub fn identity() -> Self {
        Self {
            rotation_range: 0.0,
            shift_probability: 0.0,
            scale_probability: 0.0,
            flip_horizontal_probability: 0.0,
            flip_vertical_probability: 0.0,
            saturation: FactorRange {
                min: 0.6,
                max: 2.6,
                probability: 0.0,
            },
            brightness: FactorRange {
                min: 0.6,
                max: 2.8,
                probability: 0.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.shift_probability,
            self.scale_probability,
            self.flip_horizontal_probability,
            self.flip_vertical_probability,
            self.saturation.probability,
            self.brightness.probability,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "transform probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.rotation_range < 0.0 {
            return Err(Error::Config("rotation_range must be >= 0".into()));
        }
        for (name, lo, hi) in [
            ("scale", self.scale_min, self.scale_max),
            ("saturation", self.saturation.min, self.saturation.max),
            ("brightness", self.brightness.min, self.brightness.max),
        ] {
            if !(lo < hi) || lo <= 0.0 {
                return Err(Error::Config(format!(
                    "{name} factor range must satisfy 0 < min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Additive Gaussian noise parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 0.1 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.std.is_finite() || self.std < 0.0 {
            return Err(Error::Config(format!(
                "noise std must be finite and >= 0, got {}",
                self.std
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::Config("noise mean must be finite".into()));
        }
        Ok(())
    }
}

/// Affine map from output pixel coordinates to input coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// `self` then `other`, as a single map.
    fn then(&self, other: &Affine) -> Affine {
        let a = &other.m;
        let b = &self.m;
        Affine {
            m: [
                [
                    a[0][0] * b[0][0] + a[0][1] * b[1][0],
                    a[0][0] * b[0][1] + a[0][1] * b[1][1],
                ],
                [
                    a[1][0] * b[0][0] + a[1][1] * b[1][0],
                    a[1][0] * b[0][1] + a[1][1] * b[1][1],
                ],
            ],
            t: [
                a[0][0] * self.t[0] + a[0][1] * self.t[1] + other.t[0],
                a[1][0] * self.t[0] + a[1][1] * self.t[1] + other.t[1],
            ],
        }
    }

    fn apply(&self, y: f64, x: f64) -> (f64, f64) {
        (
            self.m[0][0] * y + self.m[0][1] * x + self.t[0],
            self.m[1][0] * y + self.m[1][1] * x + self.t[1],
        )
    }
}

/// Reflect an integer coordinate into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut v = i.rem_euclid(period);
    if v >= n {
        v = period - 1 - v;
    }
    v as usize
}

/// Bilinear resample of `image` under `map` (output coords -> input coords).
fn warp(image: &ImageTensor, map: &Affine) -> ImageTensor {
    if *map == Affine::IDENTITY {
        return image.clone();
    }
    let (h, w, c) = image.dim();
    let mut out = ImageTensor::zeros((h, w, c));
    for oy in 0..h {
        for ox in 0..w {
            let (sy, sx) = map.apply(oy as f64, ox as f64);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            let y0i = reflect(y0 as i64, h);
            let y1i = reflect(y0 as i64 + 1, h);
            let x0i = reflect(x0 as i64, w);
            let x1i = reflect(x0 as i64 + 1, w);
            for ch in 0..c {
                let c00 = image[[y0i, x0i, ch]];
                let c01 = image[[y0i, x1i, ch]];
                let c10 = image[[y1i, x0i, ch]];
                let c11 = image[[y1i, x1i, ch]];
                // Lerp form keeps constant fields exactly constant.
                let top = c00 + fx * (c01 - c00);
                let bottom = c10 + fx * (c11 - c10);
                out[[oy, ox, ch]] = top + fy * (bottom - top);
            }
        }
    }
    out
}

/// Affine for a rotation by `degrees` about the image center (inverse map).
fn rotation_affine(h: usize, w: usize, degrees: f64) -> Affine {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let rad = degrees.to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    // Inverse rotation: R(-theta) about (cy, cx).
    Affine {
        m: [[cos, sin], [-sin, cos]],
        t: [
            cy - cos * cy - sin * cx,
            cx + sin * cy - cos * cx,
        ],
    }
}

/// Rotate an image about its center, bilinear with reflected borders.
pub fn rotate(image: &ImageTensor, degrees: f64) -> ImageTensor {
    let (h, w, _) = image.dim();
    if degrees == 0.0 {
        return image.clone();
    }
    warp(image, &rotation_affine(h, w, degrees))
}

/// Luma-weighted grayscale value of an RGB triple.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Blend toward (factor < 1) or away from (factor > 1) the grayscale image.
/// `factor == 1` is an exact identity.
pub fn adjust_saturation(image: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 1.0 {
        return image.clone();
    }
    let (h, w, _) = image.dim();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let gray = luma(image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]);
            for ch in 0..3 {
                let v = image[[y, x, ch]];
                out[[y, x, ch]] = (v + (1.0 - factor) * (gray - v)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Scale all channels by `factor`. `factor == 1` is an exact identity.
pub fn adjust_brightness(image: &ImageTensor, factor: f64) -> ImageTensor {
    if factor == 1.0 {
        return image.clone();
    }
    image.map(|&v| (v * factor).clamp(0.0, 1.0))
}

/// Produce the transformed view of `image` under `cfg`.
///
/// Draws from `rng` in a fixed order (rotation, shift, scale, flips,
/// saturation, brightness) so outputs are deterministic given the rng state.
pub fn similarity_transform<R: Rng>(
    image: &ImageTensor,
    cfg: &SimilarityTransformConfig,
    rng: &mut R,
) -> ImageTensor {
    let (h, w, _) = image.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    let mut map = Affine::IDENTITY;

    let angle = if cfg.rotation_range > 0.0 {
        rng.random_range(-cfg.rotation_range..=cfg.rotation_range)
    } else {
        0.0
    };
    if angle != 0.0 {
        map = map.then(&rotation_affine(h, w, angle));
    }

    if cfg.shift_probability > 0.0 && rng.random_range(0.0..1.0) < cfg.shift_probability {
        let dx = rng.random_range(-cfg.shift_horizontal..=cfg.shift_horizontal) * w as f64;
        let dy = rng.random_range(-cfg.shift_vertical..=cfg.shift_vertical) * h as f64;
        // Forward shift by (dy, dx): inverse subtracts it.
        map = map.then(&Affine {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [-dy, -dx],
        });
    }

    if cfg.scale_probability > 0.0 && rng.random_range(0.0..1.0) < cfg.scale_probability {
        let s = rng.random_range(cfg.scale_min..=cfg.scale_max);
        let inv = 1.0 / s;
        map = map.then(&Affine {
            m: [[inv, 0.0], [0.0, inv]],
            t: [cy - inv * cy, cx - inv * cx],
        });
    }

    if cfg.flip_horizontal_probability > 0.0
        && rng.random_range(0.0..1.0) < cfg.flip_horizontal_probability
    {
        map = map.then(&Affine {
            m: [[1.0, 0.0], [0.0, -1.0]],
            t: [0.0, 2.0 * cx],
        });
    }
    if cfg.flip_vertical_probability > 0.0
        && rng.random_range(0.0..1.0) < cfg.flip_vertical_probability
    {
        map = map.then(&Affine {
            m: [[-1.0, 0.0], [0.0, 1.0]],
            t: [2.0 * cy, 0.0],
        });
    }

    let mut out = warp(image, &map);

    if cfg.saturation.probability > 0.0
        && rng.random_range(0.0..1.0) < cfg.saturation.probability
    {
        let f = rng.random_range(cfg.saturation.min..=cfg.saturation.max);
        out = adjust_saturation(&out, f);
    }
    if cfg.brightness.probability > 0.0
        && rng.random_range(0.0..1.0) < cfg.brightness.probability
    {
        let f = rng.random_range(cfg.brightness.min..=cfg.brightness.max);
        out = adjust_brightness(&out, f);
    }
    out
}

/// Add element-wise Gaussian noise. `std == 0` returns the input bit-equal
/// (plus the mean shift, when one is configured) without touching the rng.
pub fn add_gaussian_noise<R: Rng>(
    image: &ImageTensor,
    spec: &NoiseSpec,
    rng: &mut R,
) -> ImageTensor {
    if spec.std == 0.0 {
        if spec.mean == 0.0 {
            return image.clone();
        }
        return image.map(|&v| v + spec.mean);
    }
    let normal = Normal::new(spec.mean, spec.std).expect("validated spec");
    let mut out = image.clone();
    Zip::from(&mut out).for_each(|v| *v += normal.sample(rng));
    out
}
