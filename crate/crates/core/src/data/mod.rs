//! Dataset representation and ingestion.
//!
//! Samples store their pixels as `u8` exactly as ingested; `[0, 1]` float
//! images are produced on access by dividing the channels by 255, so the
//! value-range invariant holds by construction. Labels are recorded for
//! every ingested sample, but consumers reading an unlabeled pool go through
//! [`Dataset::unlabeled_example`], which never exposes a class index.
//!
//! Unlabeled pools may contain rotated copies of de-labeled images. These
//! are encoded as virtual ids `"<base>#rot<millidegrees>"` and materialized
//! on access, which keeps split plans serializable as plain id lists.

mod deepweeds;
mod split;
mod synthetic;

pub use deepweeds::{load_deepweeds, DEEPWEEDS_CLASSES};
pub use split::{apply_label_scarcity, build_unlabeled_pool, stratified_kfold, SplitPlan};
pub use synthetic::generate_synthetic;

use std::collections::HashMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::augment;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Marker separating a base sample id from a rotation suffix in pool ids.
pub const ROTATION_MARKER: &str = "#rot";

/// The ordered set of class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub classes: Vec<String>,
}

impl LabelSpace {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "label space needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        Ok(Self { classes })
    }

    /// Number of classes.
    pub fn count(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    DeepWeeds,
    Synthetic,
}

/// One ingested image with its optional class index.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pixels: Array3<u8>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(id: String, pixels: Array3<u8>, label: Option<usize>) -> Self {
        Self { id, pixels, label }
    }

    /// The image with channels scaled to `[0, 1]`.
    pub fn image(&self) -> ImageTensor {
        self.pixels.map(|&v| f64::from(v) / 255.0)
    }

    /// `(height, width)` of the stored image.
    pub fn resolution(&self) -> (usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1)
    }
}

/// An immutable collection of samples plus its label space.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    pub label_space: LabelSpace,
    pub provenance: Provenance,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        label_space: LabelSpace,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if let Some(label) = s.label {
                if label >= label_space.count() {
                    return Err(Error::Schema(format!(
                        "sample {} has label {} but only {} classes are declared",
                        s.id,
                        label,
                        label_space.count()
                    )));
                }
            }
            if s.id.contains(ROTATION_MARKER) {
                return Err(Error::Schema(format!(
                    "sample id {} contains reserved marker {ROTATION_MARKER}",
                    s.id
                )));
            }
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self {
            samples,
            label_space,
            provenance,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    /// Per-class sample counts over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.label_space.count()];
        for s in &self.samples {
            if let Some(label) = s.label {
                counts[label] += 1;
            }
        }
        counts
    }

    fn base_sample(&self, id: &str) -> Result<(&Sample, Option<f64>)> {
        match id.split_once(ROTATION_MARKER) {
            None => {
                let s = self
                    .get(id)
                    .ok_or_else(|| Error::Schema(format!("unknown sample id {id}")))?;
                Ok((s, None))
            }
            Some((base, suffix)) => {
                let millideg: i64 = suffix.parse().map_err(|_| {
                    Error::Schema(format!("malformed rotation suffix in id {id}"))
                })?;
                let s = self
                    .get(base)
                    .ok_or_else(|| Error::Schema(format!("unknown sample id {base}")))?;
                Ok((s, Some(millideg as f64 / 1000.0)))
            }
        }
    }

    /// The `[0, 1]` image for an id, materializing rotated pool copies.
    pub fn image_for(&self, id: &str) -> Result<ImageTensor> {
        let (sample, rotation) = self.base_sample(id)?;
        let image = sample.image();
        match rotation {
            None => Ok(image),
            Some(degrees) => Ok(augment::rotate(&image, degrees)),
        }
    }

    /// Image and class index for a labeled-pool id.
    pub fn labeled_example(&self, id: &str) -> Result<(ImageTensor, usize)> {
        let (sample, rotation) = self.base_sample(id)?;
        let label = sample.label.ok_or_else(|| {
            Error::Contract(format!("sample {id} carries no label"))
        })?;
        let image = sample.image();
        let image = match rotation {
            None => image,
            Some(degrees) => augment::rotate(&image, degrees),
        };
        Ok((image, label))
    }

    /// Image for an unlabeled-pool id. No class index is reachable through
    /// this path, whatever the underlying sample carries.
    pub fn unlabeled_example(&self, id: &str) -> Result<ImageTensor> {
        self.image_for(id)
    }
}
