//! Deterministic synthetic image classes for desk-scale experiments.
//!
//! Each class is a (shape, interior texture) pair — circles, squares, and
//! triangles filled with up to eight fill patterns — drawn with jittered
//! position, size, and orientation over a textured background. Fill color is
//! drawn per sample from the whole palette, so color carries no label
//! information: the class lives in the structure, which is what a
//! reconstruction objective has a chance of learning from unlabeled data,
//! and what a handful of labels underdetermines.

use ndarray::Array3;
use rand::Rng;

use crate::data::{Dataset, LabelSpace, Provenance, Sample};
use crate::error::{Error, Result};
use crate::rng::stream;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.15], // red
    [0.20, 0.75, 0.25], // green
    [0.20, 0.35, 0.90], // blue
    [0.90, 0.85, 0.20], // yellow
    [0.85, 0.25, 0.80], // magenta
    [0.20, 0.80, 0.80], // cyan
    [0.95, 0.55, 0.15], // orange
    [0.55, 0.25, 0.85], // purple
];

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

const TEXTURES: [&str; 8] =
    ["plain", "stripes", "dots", "checker", "bands", "rings", "grid", "specks"];

/// Multiplicative fill modulation for texture `t` at `(py, px)`, in [0, 1].
/// Coordinates are taken relative to the shape center so the pattern moves
/// with the shape; `phase` decorrelates samples within a class.
fn texture_level(t: usize, y: f64, x: f64, cell: f64, phase: f64) -> f64 {
    let wave = |v: f64| {
        let s = (v * std::f64::consts::TAU / cell + phase).sin();
        if s > 0.0 {
            1.0
        } else {
            0.0
        }
    };
    match t {
        0 => 1.0,
        // Diagonal stripes.
        1 => wave((x + y) * std::f64::consts::FRAC_1_SQRT_2),
        2 => {
            // Dot lattice: dark disks on the fill.
            let half = cell / 2.0;
            let fy = (y + phase).rem_euclid(cell) - half;
            let fx = (x + phase).rem_euclid(cell) - half;
            if (fy * fy + fx * fx).sqrt() < cell * 0.28 {
                0.0
            } else {
                1.0
            }
        }
        3 => {
            if wave(y) == wave(x) {
                1.0
            } else {
                0.0
            }
        }
        // Horizontal bands, wider than the stripes.
        4 => wave(y * 0.6),
        5 => wave((y * y + x * x).sqrt()),
        6 => {
            // Thin dark grid lines over the fill.
            let fy = (y + phase).rem_euclid(cell);
            let fx = (x + phase).rem_euclid(cell);
            if fy < cell * 0.25 || fx < cell * 0.25 {
                0.0
            } else {
                1.0
            }
        }
        _ => {
            // Sparse square specks.
            let half = cell;
            let fy = (y + phase).rem_euclid(2.0 * half);
            let fx = (x + phase).rem_euclid(2.0 * half);
            if fy < half * 0.7 && fx < half * 0.7 {
                0.0
            } else {
                1.0
            }
        }
    }
}

/// Signed distance from point `(py, px)` to the class shape, negative inside.
fn shape_distance(shape: usize, py: f64, px: f64, cy: f64, cx: f64, r: f64, rot: f64) -> f64 {
    let dy = py - cy;
    let dx = px - cx;
    let (sin, cos) = rot.sin_cos();
    let y = cos * dy - sin * dx;
    let x = sin * dy + cos * dx;
    match shape {
        0 => (dy * dy + dx * dx).sqrt() - r,
        1 => {
            let half = r * 0.85;
            y.abs().max(x.abs()) - half
        }
        _ => {
            // Equilateral triangle: intersection of three half-planes whose
            // normals point outward from the centroid.
            let mut d = f64::NEG_INFINITY;
            for i in 0..3 {
                let a = std::f64::consts::FRAC_PI_2 + i as f64 * 2.0 * std::f64::consts::PI / 3.0;
                let (ny, nx) = (a.sin(), a.cos());
                // Inradius of an equilateral triangle with circumradius r.
                d = d.max(ny * y + nx * x - r * 0.5);
            }
            d
        }
    }
}

/// Generate `n_per_class x c` samples at `resolution x resolution`.
///
/// Deterministic in `seed`: sample `i` of the dataset is a pure function of
/// `(seed, i)`. Class `k` renders shape `k % 3` filled with texture `k / 3`,
/// which caps the class count at 24. Fill color is sampled per image.
pub fn generate_synthetic(
    n_per_class: usize,
    c: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if !(2..=TEXTURES.len() * SHAPES.len()).contains(&c) {
        return Err(Error::Config(format!(
            "class count must lie in [2, {}], got {c}",
            TEXTURES.len() * SHAPES.len()
        )));
    }
    if resolution == 0 || resolution % 4 != 0 {
        return Err(Error::Config(format!(
            "resolution must be a positive multiple of 4 (patchify stride), got {resolution}"
        )));
    }

    let res = resolution as f64;
    let mut samples = Vec::with_capacity(n_per_class * c);
    for class in 0..c {
        let shape = class % SHAPES.len();
        let texture = class / SHAPES.len();
        for i in 0..n_per_class {
            let index = (class * n_per_class + i) as u64;
            let mut rng = stream(seed, "synthetic", index);

            // Dim textured background: base tint, a linear gradient, speckle.
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.08..0.30));
            let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (gy, gx) = grad_angle.sin_cos();
            let grad_strength = rng.random_range(0.0..0.10);

            // Moderate pose jitter: enough that no pixel is class-fixed,
            // small enough that a handful of labels still gives a foothold.
            let cy = res * rng.random_range(0.40..0.60);
            let cx = res * rng.random_range(0.40..0.60);
            let r = res * rng.random_range(0.26..0.34);
            let rot = rng.random_range(-0.26..0.26);
            // Nuisance color: any palette entry, any class. Brightness is
            // normalized up so dark hues cannot sink the fill (and its
            // texture) into the background's luminance range.
            let color = PALETTE[rng.random_range(0..PALETTE.len())];
            let lum = (color[0] + color[1] + color[2]) / 3.0;
            let boost = (0.62 / lum).max(1.0);
            let fill: [f64; 3] = std::array::from_fn(|ch| {
                (color[ch] * boost + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)
            });
            let cell = res * 0.11;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);

            let mut pixels = Array3::zeros((resolution, resolution, 3));
            for py in 0..resolution {
                for px in 0..resolution {
                    let t = (py as f64 * gy + px as f64 * gx) / res;
                    let speckle = rng.random_range(-0.03..0.03);
                    let d = shape_distance(shape, py as f64, px as f64, cy, cx, r, rot);
                    let coverage = (0.5 - d).clamp(0.0, 1.0);
                    // Texture pattern rides on shape-centered coordinates so
                    // it shifts with the shape but keeps its image-axis
                    // orientation regardless of shape rotation.
                    let level =
                        texture_level(texture, py as f64 - cy, px as f64 - cx, cell, phase);
                    let tex = 0.22 + 0.78 * level;
                    for ch in 0..3 {
                        let bg = base[ch] + grad_strength * t + speckle;
                        let v = bg + coverage * (fill[ch] * tex - bg);
                        pixels[[py, px, ch]] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            samples.push(Sample::new(
                format!("syn_{class:02}_{i:04}"),
                pixels,
                Some(class),
            ));
        }
    }

    let names = (0..c)
        .map(|k| format!("{}_{}", SHAPES[k % SHAPES.len()], TEXTURES[k / SHAPES.len()]))
        .collect();
    Dataset::new(samples, LabelSpace::new(names)?, Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ImageTensor;

    #[test]
    fn counts_and_labels() {
        let ds = generate_synthetic(50, 9, 64, 1).unwrap();
        assert_eq!(ds.len(), 450);
        assert_eq!(ds.class_counts(), vec![50; 9]);
        assert_eq!(ds.label_space.count(), 9);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(5, 3, 32, 9).unwrap();
        let b = generate_synthetic(5, 3, 32, 9).unwrap();
        for (sa, sb) in a.samples().iter().zip(b.samples()) {
            assert_eq!(sa.id, sb.id);
            assert_eq!(sa.label, sb.label);
            assert_eq!(sa.image(), sb.image());
        }
        let c = generate_synthetic(5, 3, 32, 10).unwrap();
        assert_ne!(a.samples()[0].image(), c.samples()[0].image());
    }

    #[test]
    fn bad_arguments_rejected() {
        assert!(matches!(generate_synthetic(0, 3, 32, 1), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(5, 1, 32, 1), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(5, 25, 32, 1), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(5, 3, 30, 1), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(5, 3, 0, 1), Err(Error::Config(_))));
    }

    /// Nearest class-centroid over an arbitrary featurization; a stand-in for
    /// the best linear classifier a lazy model could find.
    fn centroid_probe_accuracy(ds: &Dataset, feat: impl Fn(&ImageTensor) -> Vec<f64>) -> f64 {
        let c = ds.label_space.count();
        let dim = feat(&ds.samples()[0].image()).len();
        let mut centroids = vec![vec![0.0f64; dim]; c];
        let mut counts = vec![0usize; c];
        for s in ds.samples() {
            let label = s.label.unwrap();
            for (acc, v) in centroids[label].iter_mut().zip(feat(&s.image())) {
                *acc += v;
            }
            counts[label] += 1;
        }
        for (centroid, &n) in centroids.iter_mut().zip(&counts) {
            for v in centroid.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0usize;
        for s in ds.samples() {
            let x = feat(&s.image());
            let mut best = (f64::INFINITY, 0usize);
            for (k, centroid) in centroids.iter().enumerate() {
                let d: f64 = x
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == s.label.unwrap() {
                correct += 1;
            }
        }
        correct as f64 / ds.len() as f64
    }

    /// Image-mean chromaticity: hue information with brightness divided out.
    /// (Mean brightness is deliberately left out — texture shading and shape
    /// area make it a weak structural cue, which is fair game.)
    fn mean_chroma(img: &ImageTensor) -> Vec<f64> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut sums = vec![0.0f64; 3];
        for py in 0..h {
            for px in 0..w {
                let (r, g, b) = (img[[py, px, 0]], img[[py, px, 1]], img[[py, px, 2]]);
                let total = (r + g + b).max(1e-9);
                sums[0] += r / total;
                sums[1] += g / total;
                sums[2] += b / total;
            }
        }
        sums.iter().map(|s| s / (h * w) as f64).collect()
    }

    fn luminance(img: &ImageTensor) -> Vec<f64> {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut out = Vec::with_capacity(h * w);
        for py in 0..h {
            for px in 0..w {
                out.push((img[[py, px, 0]] + img[[py, px, 1]] + img[[py, px, 2]]) / 3.0);
            }
        }
        out
    }

    /// Fill color is a per-sample draw, so hue must tell a probe nothing
    /// about the label.
    #[test]
    fn hue_carries_no_label_signal() {
        let ds = generate_synthetic(20, 9, 32, 4).unwrap();
        let acc = centroid_probe_accuracy(&ds, mean_chroma);
        assert!(acc < 0.25, "chromaticity probe accuracy {acc} (chance is 0.11)");
    }

    #[test]
    fn structure_beats_chance_for_a_luminance_probe() {
        let ds = generate_synthetic(20, 9, 32, 4).unwrap();
        let acc = centroid_probe_accuracy(&ds, luminance);
        assert!(acc > 0.2, "luminance probe accuracy {acc} (chance is 0.11)");
    }

    #[test]
    fn two_plain_shapes_separate_on_luminance() {
        let ds = generate_synthetic(10, 2, 32, 7).unwrap();
        let acc = centroid_probe_accuracy(&ds, luminance);
        assert!(acc > 0.5, "probe accuracy {acc}");
    }
}
