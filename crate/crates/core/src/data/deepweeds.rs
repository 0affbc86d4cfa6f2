//! Ingestion of a DeepWeeds-style image directory plus labels CSV.
//!
//! The labels file is a UTF-8 CSV of `filename,label,species` rows (a header
//! row is tolerated and skipped). Images are decoded from JPEG/PNG, resized
//! to the requested square resolution with bilinear filtering, and stored as
//! 8-bit RGB; consumers see `[0, 1]` values via [`Sample::image`].

use std::collections::BTreeMap;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use crate::data::{Dataset, LabelSpace, Provenance, Sample};
use crate::error::{Error, Result};

/// Class names of the DeepWeeds release: eight weed species plus a negative
/// (non-weed) class. Used when an empty labels file leaves the label space
/// undeclared.
pub const DEEPWEEDS_CLASSES: [&str; 9] = [
    "Chinee apple",
    "Lantana",
    "Parkinsonia",
    "Parthenium",
    "Prickly acacia",
    "Rubber vine",
    "Siam weed",
    "Snake weed",
    "Negative",
];

fn default_label_space() -> LabelSpace {
    LabelSpace::new(DEEPWEEDS_CLASSES.iter().map(|s| s.to_string()).collect())
        .expect("static class list is valid")
}

fn load_image(path: &Path, resolution: usize) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        message: format!("cannot decode image: {e}"),
    })?;
    let resized = img
        .resize_exact(resolution as u32, resolution as u32, FilterType::Triangle)
        .to_rgb8();
    let mut pixels = Array3::zeros((resolution, resolution, 3));
    for (x, y, p) in resized.enumerate_pixels() {
        for ch in 0..3 {
            pixels[[y as usize, x as usize, ch]] = p.0[ch];
        }
    }
    Ok(pixels)
}

/// Load a dataset from `image_dir` and `labels_file`, resizing every image
/// to `resolution x resolution`.
///
/// When `label_space` is `None` the class list is reconstructed from the
/// species column (missing names become `class{i}`); an empty labels file
/// then falls back to the nine DeepWeeds classes.
pub fn load_deepweeds(
    image_dir: &Path,
    labels_file: &Path,
    resolution: usize,
    label_space: Option<LabelSpace>,
) -> Result<Dataset> {
    if resolution == 0 || resolution % 4 != 0 {
        return Err(Error::Config(format!(
            "resolution must be a positive multiple of 4 (patchify stride), got {resolution}"
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(labels_file)
        .map_err(|e| Error::Ingestion {
            path: labels_file.to_path_buf(),
            message: format!("cannot open labels file: {e}"),
        })?;

    let mut rows: Vec<(String, usize, String)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!(
            "labels file {}: bad row {}: {e}",
            labels_file.display(),
            i + 1
        )))?;
        if record.len() != 3 {
            return Err(Error::Schema(format!(
                "labels file {}: row {} has {} columns, expected filename,label,species",
                labels_file.display(),
                i + 1,
                record.len()
            )));
        }
        let label: usize = match record[1].parse() {
            Ok(v) => v,
            // A non-numeric label in the first row is a header; elsewhere
            // it is malformed data.
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Schema(format!(
                    "labels file {}: row {}: label {:?} is not an integer",
                    labels_file.display(),
                    i + 1,
                    &record[1]
                )))
            }
        };
        rows.push((record[0].to_string(), label, record[2].to_string()));
    }

    let space = match label_space {
        Some(space) => space,
        None if rows.is_empty() => default_label_space(),
        None => {
            let mut names: BTreeMap<usize, String> = BTreeMap::new();
            let max_label = rows.iter().map(|r| r.1).max().unwrap();
            for (_, label, species) in &rows {
                names.entry(*label).or_insert_with(|| species.clone());
            }
            let classes = (0..=max_label)
                .map(|i| names.get(&i).cloned().unwrap_or_else(|| format!("class{i}")))
                .collect();
            LabelSpace::new(classes)?
        }
    };

    let mut samples = Vec::with_capacity(rows.len());
    for (filename, label, _) in rows {
        if label >= space.count() {
            return Err(Error::Schema(format!(
                "{filename}: label {label} exceeds the {}-class label space",
                space.count()
            )));
        }
        let path = image_dir.join(&filename);
        if !path.is_file() {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                message: "image file listed in labels CSV is missing".into(),
            });
        }
        let pixels = load_image(&path, resolution)?;
        samples.push(Sample::new(filename, pixels, Some(label)));
    }

    Dataset::new(samples, space, Provenance::DeepWeeds)
}
