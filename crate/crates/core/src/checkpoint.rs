//! Checkpoint container: named parameter tensors with shape metadata and the
//! architecture config echoed in the header.
//!
//! Layout on disk:
//!
//! ```text
//! magic "WSCK" | format u32 LE | header_len u64 LE | header JSON | payload
//! ```
//!
//! The header lists every tensor with name, shape and element offset into the
//! payload, which is a flat run of f64 little-endian values. Values round-trip
//! bit-exactly, so reloading a checkpoint reproduces evaluation metrics to the
//! last ulp.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"WSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element (not byte) offset into the payload.
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Free-form run metadata: epoch, validation accuracy, manifest hash, ...
    pub meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

pub fn save(
    path: &Path,
    model_cfg: &ModelConfig,
    meta: &BTreeMap<String, String>,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, values) in tensors {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {shape:?} implies {expect} values, got {}",
                values.len()
            )));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: values.len() as u64,
        });
        offset += values.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model_cfg.clone(),
        meta: meta.clone(),
        tensors: entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for (_, _, values) in tensors {
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io)?;
    let total: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total as usize * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes but header expects {}",
            payload.len(),
            total * 8
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset as usize * 8;
        let end = start + entry.len as usize * 8;
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), entry.shape.clone(), values));
    }
    Ok((header, tensors))
}

/// Rebuild a model from a checkpoint: construct the architecture echoed in
/// the header, then overwrite every parameter with the stored tensors.
pub fn restore_model(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let (header, tensors) = load(path)?;
    let mut model = Model::new(&header.model, 0)?;
    model.import_weights(&tensors)?;
    Ok((model, header))
}

/// Convenience: snapshot a live model.
pub fn save_model(path: &Path, model: &Model, meta: &BTreeMap<String, String>) -> Result<()> {
    save(path, &model.cfg, meta, &model.export_weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stage_depths: [1, 1, 1, 1],
                stage_widths: [4, 6, 8, 10],
                dw_kernel: 3,
                expansion: 2,
                patch_size: 4,
            },
            decoder: Default::default(),
            classes: 3,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::new(&tiny_cfg(), 99).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".into(), "7".into());
        save_model(&path, &model, &meta).unwrap();

        let (restored, header) = restore_model(&path).unwrap();
        assert_eq!(header.meta["epoch"], "7");
        assert_eq!(header.model, tiny_cfg());
        let a = model.export_weights();
        let b = restored.export_weights();
        assert_eq!(a.len(), b.len());
        for ((na, sa, va), (nb, sb, vb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(sa, sb);
            for (x, y) in va.iter().zip(vb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_garbage_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.ckpt");
        std::fs::write(&bogus, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&bogus), Err(Error::Checkpoint(_))));

        let missing = dir.path().join("nope.ckpt");
        match load(&missing) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("nope.ckpt")),
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_shape_value_mismatch_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let tensors = vec![("w".to_string(), vec![2, 2], vec![0.0; 3])];
        assert!(matches!(
            save(&path, &tiny_cfg(), &BTreeMap::new(), &tensors),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        let model = Model::new(&tiny_cfg(), 3).unwrap();
        save_model(&path, &model, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
