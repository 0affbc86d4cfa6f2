//! The trainable network: encoder, decoder and classifier head.
//!
//! All three components share one parameter convention ([`layers::Param`]:
//! value plus gradient buffer) and are reachable through prefixed visitors
//! (`encoder.*`, `decoder.*`, `head.*`), which is what the optimizer, the
//! checkpoint container and the weight-import hook are built on.
//!
//! Initialization draws each component from its own named rng stream, so
//! constructing (or skipping) the decoder never changes how the encoder or
//! head come up for a given seed.

pub mod decoder;
pub mod encoder;
pub mod layers;

pub use decoder::{Decoder, DecoderCache, DecoderConfig};
pub use encoder::{Encoder, EncoderCache, EncoderConfig, SkipBundle, SkipKind, SkipTap};
pub use layers::{Activation, Dense, Param};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Complete architecture description, as echoed into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::micro(),
            decoder: DecoderConfig::default(),
            classes: 9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Dense,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), &mut stream(seed, "init_encoder", 0))?;
        let decoder = Decoder::new(
            &cfg.encoder,
            cfg.decoder,
            &mut stream(seed, "init_decoder", 0),
        )?;
        let head = Dense::new(
            cfg.encoder.feature_dim(),
            cfg.classes,
            &mut stream(seed, "init_head", 0),
        );
        Ok(Self { cfg: cfg.clone(), encoder, decoder, head })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        self.head.visit("head", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut("encoder", f);
        self.decoder.visit_mut("decoder", f);
        self.head.visit_mut("head", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Vanilla SGD: `p -= lr * grad` (momentum and damping are zero by
    /// construction elsewhere).
    pub fn sgd_step(&mut self, lr: f64) {
        self.visit_params_mut(&mut |_, p| {
            let grad = p.grad.clone();
            p.value.scaled_add(-lr, &grad);
        });
    }

    /// Export every parameter as `(name, shape, values)` in visit order.
    pub fn export_weights(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| {
            out.push((name, p.shape().to_vec(), p.values().to_vec()));
        });
        out
    }

    /// Import named tensors (e.g. pretrained weights or a checkpoint).
    ///
    /// Every provided name must exist with exactly the stored shape; all
    /// offending layers are collected into one error. Parameters absent from
    /// `tensors` keep their current values, so partial imports (encoder only,
    /// say) are legal.
    pub fn import_weights(&mut self, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_name: HashMap<&str, (&[usize], &[f64])> = HashMap::new();
        for (name, shape, values) in tensors {
            by_name.insert(name.as_str(), (shape, values));
        }
        let mut offending: Vec<String> = Vec::new();
        let mut imported = 0usize;
        self.visit_params_mut(&mut |name, p| {
            if let Some((shape, values)) = by_name.remove(name.as_str()) {
                if shape != p.shape() || values.len() != p.len() {
                    offending.push(format!(
                        "{name}: expected shape {:?}, got {:?}",
                        p.shape(),
                        shape
                    ));
                } else {
                    p.values_mut().copy_from_slice(values);
                    imported += 1;
                }
            }
        });
        for (name, _) in by_name {
            offending.push(format!("{name}: no such parameter in this architecture"));
        }
        if !offending.is_empty() {
            offending.sort();
            return Err(Error::WeightImport(offending.join("; ")));
        }
        let _ = imported;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                stage_depths: [1, 1, 1, 1],
                stage_widths: [4, 6, 8, 10],
                dw_kernel: 3,
                expansion: 2,
                patch_size: 4,
            },
            decoder: DecoderConfig::default(),
            classes: 3,
        }
    }

    #[test]
    fn init_is_deterministic_per_component() {
        let a = Model::new(&tiny(), 42).unwrap();
        let b = Model::new(&tiny(), 42).unwrap();
        assert_eq!(a.export_weights(), b.export_weights());
        let c = Model::new(&tiny(), 43).unwrap();
        assert_ne!(a.export_weights(), c.export_weights());
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::new(&tiny(), 1).unwrap();
        let mut names = Vec::new();
        m.visit_params(&mut |n, _| names.push(n));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(names.iter().any(|n| n.starts_with("encoder.stem")));
        assert!(names.iter().any(|n| n.starts_with("decoder.final")));
        assert!(names.iter().any(|n| n.starts_with("head.")));
    }

    #[test]
    fn export_import_round_trip() {
        let a = Model::new(&tiny(), 7).unwrap();
        let mut b = Model::new(&tiny(), 8).unwrap();
        assert_ne!(a.export_weights(), b.export_weights());
        b.import_weights(&a.export_weights()).unwrap();
        assert_eq!(a.export_weights(), b.export_weights());
    }

    #[test]
    fn import_reports_every_offending_layer() {
        let mut m = Model::new(&tiny(), 1).unwrap();
        let tensors = vec![
            ("head.bias".to_string(), vec![99], vec![0.0; 99]),
            ("no.such.layer".to_string(), vec![1], vec![0.0]),
        ];
        match m.import_weights(&tensors) {
            Err(Error::WeightImport(msg)) => {
                assert!(msg.contains("head.bias"), "{msg}");
                assert!(msg.contains("no.such.layer"), "{msg}");
            }
            other => panic!("expected weight-import error, got {other:?}"),
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        m.zero_grads();
        m.visit_params_mut(&mut |_, p| p.grad.fill(1.0));
        let before = m.export_weights();
        m.sgd_step(0.1);
        let after = m.export_weights();
        for ((_, _, b), (_, _, a)) in before.iter().zip(&after) {
            for (x, y) in b.iter().zip(a) {
                assert!((y - (x - 0.1)).abs() < 1e-15);
            }
        }
        // Zero lr leaves parameters untouched.
        m.sgd_step(0.0);
        assert_eq!(m.export_weights(), after);
    }
}
