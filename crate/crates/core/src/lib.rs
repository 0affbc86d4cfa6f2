//! Semi-supervised image classification with consistency regularization and
//! similarity learning.
//!
//! The toolkit trains a convolutional autoencoder whose encoder follows the
//! ConvNeXt design (patchify stem, depthwise 7x7 convolutions, inverted
//! bottlenecks, layer normalization) and whose decoder mirrors it stage by
//! stage, consuming residual and non-residual skip-connections through
//! element-wise-sum deconvolution blocks. Training jointly minimizes three
//! terms: supervised cross-entropy on labeled samples, an L2 consistency
//! loss that reconstructs clean images from noisy inputs, and a cosine
//! similarity loss that aligns encoder features of two augmented views.
//!
//! The crate also ships the experimental harness: DeepWeeds-format and
//! synthetic ingestion, stratified k-fold cross-validation with label
//! scarcity protocols, noise-robustness sweeps and an ablation grid runner.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
