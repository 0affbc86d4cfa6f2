//! Tensor aliases and small shape helpers.
//!
//! Feature maps are stored `(height, width, channels)` with channels
//! contiguous, so per-position channel operations (layer norm, 1x1
//! convolutions) run on contiguous slices.

use ndarray::{Array1, Array3};

/// An H x W x 3 image with values in `[0, 1]` after ingestion.
pub type ImageTensor = Array3<f64>;

/// An intermediate H x W x C activation map.
pub type FeatureMap = Array3<f64>;

/// The pooled encoder output used by the classifier head and the
/// similarity loss.
pub type FeatureVector = Array1<f64>;

/// `(height, width)` of a map.
pub fn spatial(map: &FeatureMap) -> (usize, usize) {
    let d = map.dim();
    (d.0, d.1)
}

/// Number of channels of a map.
pub fn channels(map: &FeatureMap) -> usize {
    map.dim().2
}

/// True when every element is finite.
pub fn all_finite(map: &FeatureMap) -> bool {
    map.iter().all(|v| v.is_finite())
}
