//! Loss terms and their gradients.
//!
//! Three ingredients: cross-entropy on the labeled noisy view, a
//! reconstruction-consistency term over both views, and a feature-similarity
//! term between the two views. The trainer combines them as
//! `l_total = l_ce + lambda_cr * l_cr + lambda_sim * l_sim`, each component
//! averaged over its own batch (cross-entropy over labeled samples only,
//! the other two over the full batch).
//!
//! Everything here is per-sample and pure; batch averaging and weighting
//! live in the trainer so these functions stay directly checkable against
//! brute-force oracles.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureVector, ImageTensor};

/// Probability floor inside the log, so a collapsed softmax yields a large
/// finite loss instead of `inf`.
pub const CE_FLOOR: f64 = 1e-12;

/// Denominator guard for cosine similarity.
pub const COS_EPS: f64 = 1e-8;

/// How the reconstruction term aggregates over pixels.
///
/// `PerElement` (the default) divides each squared norm by the element count,
/// making the term resolution-independent; `RawSum` keeps the plain summed
/// squared error. The choice is recorded in the run manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsistencyNorm {
    #[default]
    PerElement,
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cr: f64,
    pub lambda_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cr: 1.0, lambda_sim: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cr", self.lambda_cr), ("lambda_sim", self.lambda_sim)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &FeatureVector) -> FeatureVector {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|e| e / sum);
    out
}

/// `-ln(probs[label])` with the floor applied inside the log.
pub fn supervised_loss(label: usize, probs: &FeatureVector) -> f64 {
    -probs[label].max(CE_FLOOR).ln()
}

/// Gradient of the cross-entropy w.r.t. the *logits* feeding [`softmax`]:
/// `probs - onehot(label)`. The floor only guards the loss value; at the
/// floor the true probability is so small the standard gradient still points
/// the right way.
pub fn supervised_loss_grad(label: usize, probs: &FeatureVector) -> FeatureVector {
    let mut g = probs.clone();
    g[label] -= 1.0;
    g
}

fn squared_error(target: &ImageTensor, recon: &ImageTensor) -> Result<f64> {
    if target.dim() != recon.dim() {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} does not match target {:?}",
            recon.dim(),
            target.dim()
        )));
    }
    Ok(Zip::from(target).and(recon).fold(0.0, |acc, &t, &r| acc + (t - r) * (t - r)))
}

/// One half of the consistency term: `1/2 * ||target - recon||^2`, divided by
/// the element count under `PerElement`.
pub fn consistency_pair_loss(
    target: &ImageTensor,
    recon: &ImageTensor,
    norm: ConsistencyNorm,
) -> Result<f64> {
    let sq = squared_error(target, recon)?;
    Ok(match norm {
        ConsistencyNorm::PerElement => 0.5 * sq / target.len() as f64,
        ConsistencyNorm::RawSum => 0.5 * sq,
    })
}

/// Full consistency loss over both views:
/// `1/2 (||x - rx||^2 + ||x2 - rx2||^2)` with the chosen normalization.
pub fn consistency_loss(
    clean_v1: &ImageTensor,
    recon_v1: &ImageTensor,
    clean_v2: &ImageTensor,
    recon_v2: &ImageTensor,
    norm: ConsistencyNorm,
) -> Result<f64> {
    Ok(consistency_pair_loss(clean_v1, recon_v1, norm)?
        + consistency_pair_loss(clean_v2, recon_v2, norm)?)
}

/// Gradient of [`consistency_pair_loss`] w.r.t. the reconstruction.
pub fn consistency_pair_grad(
    target: &ImageTensor,
    recon: &ImageTensor,
    norm: ConsistencyNorm,
) -> Result<ImageTensor> {
    if target.dim() != recon.dim() {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} does not match target {:?}",
            recon.dim(),
            target.dim()
        )));
    }
    let scale = match norm {
        ConsistencyNorm::PerElement => 1.0 / target.len() as f64,
        ConsistencyNorm::RawSum => 1.0,
    };
    Ok((recon - target) * scale)
}

/// Cosine similarity with the guarded denominator
/// `max(||u|| * ||v||, COS_EPS)`.
pub fn cosine_similarity(u: &FeatureVector, v: &FeatureVector) -> f64 {
    assert_eq!(u.len(), v.len(), "cosine similarity needs equal lengths");
    let dot = u.dot(v);
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    dot / (nu * nv).max(COS_EPS)
}

/// `1 - cos(u, v)`; lies in `[0, 2]` for any non-degenerate pair.
pub fn similarity_loss(u: &FeatureVector, v: &FeatureVector) -> f64 {
    1.0 - cosine_similarity(u, v)
}

/// Gradients of [`similarity_loss`] w.r.t. both feature vectors.
///
/// In the guarded regime (`||u|| * ||v|| < COS_EPS`) the denominator is the
/// constant `COS_EPS` and the gradient reduces to `-v / COS_EPS` (resp. `-u`).
pub fn similarity_loss_grads(
    u: &FeatureVector,
    v: &FeatureVector,
) -> (FeatureVector, FeatureVector) {
    let dot = u.dot(v);
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    let prod = nu * nv;
    if prod < COS_EPS {
        return (v * (-1.0 / COS_EPS), u * (-1.0 / COS_EPS));
    }
    // d(1 - u.v / (|u||v|)) / du = -v/(|u||v|) + (u.v) u / (|u|^3 |v|)
    let cos = dot / prod;
    let du = v * (-1.0 / prod) + u * (cos / (nu * nu));
    let dv = u * (-1.0 / prod) + v * (cos / (nv * nv));
    (du, dv)
}

/// Weighted total. `NaN` in any component is treated as divergence and
/// reported with per-component attribution; the trainer re-wraps the error
/// with the epoch and learning rate at which it happened.
pub fn total_loss(l_ce: f64, l_cr: f64, l_sim: f64, w: &LossWeights) -> Result<f64> {
    let total = l_ce + w.lambda_cr * l_cr + w.lambda_sim * l_sim;
    if l_ce.is_nan() || l_cr.is_nan() || l_sim.is_nan() || total.is_nan() {
        return Err(Error::Divergence { epoch: 0, lr: f64::NAN, ce: l_ce, cr: l_cr, sim: l_sim });
    }
    Ok(total)
}
