//! Experiment configuration: strict-schema TOML in, resolved manifest out.
//!
//! Unknown keys anywhere in the file are rejected so a typo'd field can never
//! silently fall back to a default. The fully resolved config (plus a code
//! version stamp) is what gets hashed into the manifest that names a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Procedurally generated shape/color classification set.
    Synthetic,
    /// Image directory plus labels CSV.
    Deepweeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DatasetSource,
    /// Required for `deepweeds`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<PathBuf>,
    /// Square edge length every image is resized/generated at.
    pub resolution: usize,
    /// Synthetic only: class count and images per class.
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            image_dir: None,
            labels_file: None,
            resolution: 64,
            classes: 9,
            per_class: 60,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub k: usize,
    pub seed: u64,
    /// Fraction of the whole dataset kept labeled in each fold's train
    /// partition.
    pub fraction: f64,
    /// Unlabeled-to-labeled target ratio (`5` means 1:5).
    pub ratio: u32,
    /// Rotated virtual copies per pool image used to top the pool up towards
    /// the target ratio; `0` disables augmentation-based top-up.
    pub rotation_copies: u32,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { k: 5, seed: 1234, fraction: 0.10, ratio: 5, rotation_copies: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelScale {
    /// Depths (1,1,3,1), widths (32,64,128,256) — desk-scale runs.
    Micro,
    /// Depths (3,3,27,3), widths (128,256,512,1024).
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub scale: ModelScale,
    pub leaky_slope: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { scale: ModelScale::Micro, leaky_slope: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Noise levels for the inference sweep, non-decreasing.
    pub sigmas: Vec<f64>,
    pub noise_mean: f64,
    /// Decoupled from every training seed so sweeps are comparable across
    /// variants.
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { sigmas: vec![0.0, 0.05, 0.075, 0.1, 0.125], noise_mean: 0.0, seed: 9090 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub variants: Vec<crate::trainer::Variant>,
    pub fractions: Vec<f64>,
    pub ratios: Vec<u32>,
    /// Fold indices to run; empty means every fold `0..k`.
    pub folds: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        use crate::trainer::Variant;
        Self {
            variants: vec![Variant::SslScr, Variant::SslTfsim, Variant::Ssl, Variant::Supervised],
            fractions: vec![0.20, 0.15, 0.10, 0.05],
            ratios: vec![5, 11],
            folds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub grid: GridSection,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.resolution == 0 || self.dataset.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 4, got {}",
                self.dataset.resolution
            )));
        }
        if self.dataset.source == DatasetSource::Deepweeds {
            if self.dataset.image_dir.is_none() || self.dataset.labels_file.is_none() {
                return Err(Error::Config(
                    "deepweeds source needs both image_dir and labels_file".into(),
                ));
            }
        }
        if self.split.k < 3 {
            return Err(Error::Config(format!(
                "k-fold needs k >= 3 (train/validation/test partitions), got {}",
                self.split.k
            )));
        }
        if !(0.0..=1.0).contains(&self.split.fraction) {
            return Err(Error::Config(format!(
                "label fraction must lie in [0, 1], got {}",
                self.split.fraction
            )));
        }
        for w in self.eval.sigmas.windows(2) {
            if w[0] > w[1] {
                return Err(Error::Config(format!(
                    "eval sigmas must be non-decreasing: {:?}",
                    self.eval.sigmas
                )));
            }
        }
        if self.grid.variants.is_empty()
            || self.grid.fractions.is_empty()
            || self.grid.ratios.is_empty()
        {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        if self.grid.folds.iter().any(|&f| f >= self.split.k) {
            return Err(Error::Config(format!(
                "grid fold indices must lie below k = {}",
                self.split.k
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        self.train.validate()?;
        self.model_config(self.dataset.classes.max(2)).validate()?;
        Ok(())
    }

    /// Materialize the dataset this config describes.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset.source {
            DatasetSource::Synthetic => data::generate_synthetic(
                self.dataset.per_class,
                self.dataset.classes,
                self.dataset.resolution,
                self.dataset.seed,
            ),
            DatasetSource::Deepweeds => data::load_deepweeds(
                self.dataset.image_dir.as_ref().unwrap(),
                self.dataset.labels_file.as_ref().unwrap(),
                self.dataset.resolution,
                None,
            ),
        }
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let encoder = match self.model.scale {
            ModelScale::Micro => EncoderConfig::micro(),
            ModelScale::Base => EncoderConfig::base(),
        };
        ModelConfig {
            encoder,
            decoder: DecoderConfig { leaky_slope: self.model.leaky_slope },
            classes,
        }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.out_dir.join("splits")
    }

    pub fn split_file(&self, fold: usize) -> PathBuf {
        self.split_dir().join(format!("fold_{fold}.json"))
    }

    pub fn train_dir(&self, fold: usize) -> PathBuf {
        self.out_dir.join("train").join(format!("fold_{fold}"))
    }

    pub fn eval_dir(&self, fold: usize) -> PathBuf {
        self.out_dir.join("eval").join(format!("fold_{fold}"))
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.out_dir.join("grid")
    }
}

/// Everything that determines a run's outputs, frozen for hashing. Two runs
/// with equal manifests are bit-identical (timestamps aside), which is what
/// makes hash-based grid resume sound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub fold: usize,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub consistency_norm: crate::losses::ConsistencyNorm,
}

impl Manifest {
    pub fn for_run(cfg: &ExperimentConfig, fold: usize) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            fold,
            dataset: cfg.dataset.clone(),
            split: cfg.split.clone(),
            model: cfg.model.clone(),
            train: cfg.train.clone(),
            consistency_norm: cfg.train.consistency_norm,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
