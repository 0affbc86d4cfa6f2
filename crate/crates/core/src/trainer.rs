//! The semi-supervised training loop.
//!
//! Each step combines a labeled mini-batch with an unlabeled one, runs both
//! noisy views through the autoencoder, and descends the weighted total loss
//! with plain SGD under a stepped learning-rate schedule. The labeled stream
//! is sampled without replacement (one epoch = one full pass over the labeled
//! pool); the unlabeled stream cycles independently at its own rate. Model
//! selection is by validation accuracy after every epoch.
//!
//! Reproducibility: all randomness inside a run flows from `TrainConfig::seed`
//! through named per-purpose streams (batch order, view transforms, the two
//! noise draws), so two runs with the same config are bit-identical — and a
//! variant that never touches a stream (e.g. supervised never draws view-2
//! noise) leaves every other stream unperturbed.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{add_gaussian_noise, similarity_transform, NoiseSpec, SimilarityTransformConfig};
use crate::checkpoint;
use crate::data::{Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    consistency_pair_grad, consistency_pair_loss, similarity_loss, similarity_loss_grads,
    softmax, supervised_loss, supervised_loss_grad, total_loss, ConsistencyNorm, LossWeights,
};
use crate::model::{Model, ModelConfig};
use crate::rng::stream;
use crate::tensor::ImageTensor;

/// Learning-rate schedule constants: multiply by 0.9 every 10 epochs.
pub const LR_DECAY: f64 = 0.9;
pub const LR_DECAY_EVERY: usize = 10;

/// Default cap applied when the unlabeled batch size is derived from the
/// labeled size and the pool ratio.
pub const MAX_DERIVED_UNLABELED_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Transformed second view, both views noised; CE + CR + similarity.
    SslScr,
    /// Transformed second view; CE + CR (no similarity term).
    SslTfsim,
    /// Second view equals the first (fresh noise only); CE + CR.
    Ssl,
    /// Labeled data only; CE alone.
    Supervised,
}

impl Variant {
    pub fn applies_transforms(self) -> bool {
        matches!(self, Variant::SslScr | Variant::SslTfsim)
    }

    pub fn uses_similarity(self) -> bool {
        matches!(self, Variant::SslScr)
    }

    pub fn uses_consistency(self) -> bool {
        !matches!(self, Variant::Supervised)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SslScr => "ssl-scr",
            Variant::SslTfsim => "ssl-tfsim",
            Variant::Ssl => "ssl",
            Variant::Supervised => "supervised",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub base_lr: f64,
    pub epochs: usize,
    /// Kept explicit so the vanilla-SGD contract is visible in configs and
    /// manifests; any nonzero value is rejected.
    pub momentum: f64,
    pub damping: f64,
    pub batch_size_labeled: usize,
    /// `None` derives `batch_size_labeled * ratio`, capped at
    /// [`MAX_DERIVED_UNLABELED_BATCH`].
    pub batch_size_unlabeled: Option<usize>,
    pub noise: NoiseSpec,
    pub transform: SimilarityTransformConfig,
    pub weights: LossWeights,
    pub consistency_norm: ConsistencyNorm,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::SslScr,
            base_lr: 0.01,
            epochs: 60,
            momentum: 0.0,
            damping: 0.0,
            batch_size_labeled: 8,
            batch_size_unlabeled: None,
            noise: NoiseSpec::default(),
            transform: SimilarityTransformConfig::default(),
            weights: LossWeights::default(),
            consistency_norm: ConsistencyNorm::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.momentum != 0.0 || self.damping != 0.0 {
            return Err(Error::Config(format!(
                "this optimizer is vanilla SGD: momentum and damping must both be 0, got {} / {}",
                self.momentum, self.damping
            )));
        }
        if self.batch_size_labeled == 0 {
            return Err(Error::Config("batch_size_labeled must be at least 1".into()));
        }
        if self.batch_size_unlabeled == Some(0) {
            return Err(Error::Config("batch_size_unlabeled must be at least 1 when set".into()));
        }
        self.noise.validate()?;
        self.transform.validate()?;
        self.weights.validate()?;
        Ok(())
    }

    /// Loss weights after variant gating: variants that exclude a term force
    /// its weight to zero regardless of the configured value.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cr: if self.variant.uses_consistency() { self.weights.lambda_cr } else { 0.0 },
            lambda_sim: if self.variant.uses_similarity() { self.weights.lambda_sim } else { 0.0 },
        }
    }
}

/// Stepped schedule: `base_lr * 0.9^(epoch / 10)` with integer division,
/// epochs counted from 0.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr * LR_DECAY.powi((epoch / LR_DECAY_EVERY) as i32)
}

/// One materialized view: the clean image the reconstruction is regressed
/// onto, and its noised counterpart that actually enters the network.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub clean: ImageTensor,
    pub noisy: ImageTensor,
}

/// A sample with all randomness already spent. Loss and gradient computation
/// downstream of this struct is deterministic and rng-free.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub primary: ViewPair,
    /// Present only when the active loss terms need a second view.
    pub secondary: Option<ViewPair>,
    pub label: Option<usize>,
}

/// Batch-mean loss components. `ce` averages over labeled samples only;
/// `cr` and `sim` average over the whole batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub ce: f64,
    pub cr: f64,
    pub sim: f64,
    pub total: f64,
    pub n_labeled: usize,
    pub n_total: usize,
}

fn second_view<'a>(
    sample: &'a PreparedSample,
    need_second: bool,
) -> Result<Option<&'a ViewPair>> {
    match (&sample.secondary, need_second) {
        (Some(v), true) => Ok(Some(v)),
        (None, true) => Err(Error::Contract(
            "active consistency/similarity terms need a second view per sample".into(),
        )),
        (_, false) => Ok(None),
    }
}

fn finalize_batch(
    sums: (f64, f64, f64),
    n_labeled: usize,
    n_total: usize,
    eff: &LossWeights,
) -> Result<BatchLosses> {
    let ce = if n_labeled == 0 { 0.0 } else { sums.0 / n_labeled as f64 };
    let cr = sums.1 / n_total as f64;
    let sim = sums.2 / n_total as f64;
    let total = total_loss(ce, cr, sim, eff)?;
    Ok(BatchLosses { ce, cr, sim, total, n_labeled, n_total })
}

/// Forward-only loss evaluation of a prepared batch. Deliberately a separate
/// straight-line pass rather than a flag on [`batch_gradients`], so finite
/// differencing the loss exercises none of the backward bookkeeping.
pub fn batch_losses(
    model: &Model,
    batch: &[PreparedSample],
    eff: &LossWeights,
    norm: ConsistencyNorm,
) -> Result<BatchLosses> {
    assert!(!batch.is_empty(), "empty batch");
    let n_total = batch.len();
    let n_labeled = batch.iter().filter(|s| s.label.is_some()).count();
    let need_second = eff.lambda_cr > 0.0 || eff.lambda_sim > 0.0;
    let mut sums = (0.0, 0.0, 0.0);

    for sample in batch {
        let (feat1, skips1, _) = model.encoder.encode(&sample.primary.noisy)?;
        if let Some(label) = sample.label {
            let (logits, _) = model.head.forward(&feat1);
            sums.0 += supervised_loss(label, &softmax(&logits));
        }
        if let Some(second) = second_view(sample, need_second)? {
            let (feat2, skips2, _) = model.encoder.encode(&second.noisy)?;
            if eff.lambda_cr > 0.0 {
                let (recon1, _) = model.decoder.decode(&skips1)?;
                let (recon2, _) = model.decoder.decode(&skips2)?;
                sums.1 += consistency_pair_loss(&sample.primary.clean, &recon1, norm)?
                    + consistency_pair_loss(&second.clean, &recon2, norm)?;
            }
            if eff.lambda_sim > 0.0 {
                sums.2 += similarity_loss(&feat1, &feat2);
            }
        }
    }
    finalize_batch(sums, n_labeled, n_total, eff)
}

/// Forward + backward: accumulates the gradient of the batch-mean total loss
/// into the model's parameter gradient buffers (callers zero them first) and
/// returns the same loss components as [`batch_losses`].
///
/// Per-term scaling: each labeled sample's CE gradient carries `1/n_labeled`,
/// each view's consistency gradient `lambda_cr / n_total`, each similarity
/// gradient `lambda_sim / n_total`, matching the batch-mean total exactly.
pub fn batch_gradients(
    model: &mut Model,
    batch: &[PreparedSample],
    eff: &LossWeights,
    norm: ConsistencyNorm,
) -> Result<BatchLosses> {
    assert!(!batch.is_empty(), "empty batch");
    let n_total = batch.len();
    let n_labeled = batch.iter().filter(|s| s.label.is_some()).count();
    let need_second = eff.lambda_cr > 0.0 || eff.lambda_sim > 0.0;
    let mut sums = (0.0, 0.0, 0.0);

    for sample in batch {
        let (feat1, skips1, cache1) = model.encoder.encode(&sample.primary.noisy)?;
        let mut d_feat1 = ndarray::Array1::zeros(feat1.len());
        let mut d_taps1: Option<Vec<crate::tensor::FeatureMap>> = None;

        if let Some(label) = sample.label {
            let (logits, head_cache) = model.head.forward(&feat1);
            let probs = softmax(&logits);
            sums.0 += supervised_loss(label, &probs);
            let d_logits = supervised_loss_grad(label, &probs) * (1.0 / n_labeled as f64);
            d_feat1 += &model.head.backward(&head_cache, &d_logits);
        }

        if let Some(second) = second_view(sample, need_second)? {
            let (feat2, skips2, cache2) = model.encoder.encode(&second.noisy)?;
            let mut d_feat2 = ndarray::Array1::zeros(feat2.len());
            let mut d_taps2: Option<Vec<crate::tensor::FeatureMap>> = None;

            if eff.lambda_cr > 0.0 {
                let (recon1, dec_cache1) = model.decoder.decode(&skips1)?;
                let (recon2, dec_cache2) = model.decoder.decode(&skips2)?;
                sums.1 += consistency_pair_loss(&sample.primary.clean, &recon1, norm)?
                    + consistency_pair_loss(&second.clean, &recon2, norm)?;
                let scale = eff.lambda_cr / n_total as f64;
                let d_recon1 = consistency_pair_grad(&sample.primary.clean, &recon1, norm)? * scale;
                let d_recon2 = consistency_pair_grad(&second.clean, &recon2, norm)? * scale;
                d_taps1 = Some(model.decoder.backward(&dec_cache1, &d_recon1));
                d_taps2 = Some(model.decoder.backward(&dec_cache2, &d_recon2));
            }

            if eff.lambda_sim > 0.0 {
                sums.2 += similarity_loss(&feat1, &feat2);
                let scale = eff.lambda_sim / n_total as f64;
                let (du, dv) = similarity_loss_grads(&feat1, &feat2);
                d_feat1.scaled_add(scale, &du);
                d_feat2.scaled_add(scale, &dv);
            }

            let has2 = d_feat2.iter().any(|&g| g != 0.0);
            model.encoder.backward(&cache2, has2.then_some(&d_feat2), d_taps2.as_deref());
        }

        let has1 = d_feat1.iter().any(|&g| g != 0.0);
        model.encoder.backward(&cache1, has1.then_some(&d_feat1), d_taps1.as_deref());
    }
    finalize_batch(sums, n_labeled, n_total, eff)
}

/// Materialize the two views of one raw image. Rng streams are only consumed
/// by the work actually performed: no transform draw outside the transform
/// variants, no second noise draw when `need_second` is false.
#[allow(clippy::too_many_arguments)]
pub fn prepare_sample<R: rand::Rng>(
    image: ImageTensor,
    label: Option<usize>,
    variant: Variant,
    need_second: bool,
    transform: &SimilarityTransformConfig,
    noise: &NoiseSpec,
    rng_transform: &mut R,
    rng_noise_primary: &mut R,
    rng_noise_secondary: &mut R,
) -> PreparedSample {
    let noisy1 = add_gaussian_noise(&image, noise, rng_noise_primary);
    let secondary = if need_second {
        let clean2 = if variant.applies_transforms() {
            similarity_transform(&image, transform, rng_transform)
        } else {
            image.clone()
        };
        let noisy2 = add_gaussian_noise(&clean2, noise, rng_noise_secondary);
        Some(ViewPair { clean: clean2, noisy: noisy2 })
    } else {
        None
    };
    PreparedSample { primary: ViewPair { clean: image, noisy: noisy1 }, secondary, label }
}

/// Interleaves the two id streams into per-step batches.
struct BatchComposer {
    labeled: Vec<String>,
    cursor: usize,
    unlabeled_pool: Vec<String>,
    unlabeled_order: Vec<String>,
    unlabeled_cursor: usize,
    reshuffles: u64,
    b_labeled: usize,
    b_unlabeled: usize,
    seed: u64,
}

impl BatchComposer {
    fn new(
        labeled: Vec<String>,
        unlabeled_pool: Vec<String>,
        b_labeled: usize,
        b_unlabeled: usize,
        seed: u64,
    ) -> Self {
        Self {
            labeled,
            cursor: 0,
            unlabeled_pool,
            unlabeled_order: Vec::new(),
            unlabeled_cursor: 0,
            reshuffles: 0,
            b_labeled,
            b_unlabeled,
            seed,
        }
    }

    fn start_epoch(&mut self, epoch: usize) {
        use rand::seq::SliceRandom;
        let mut rng = stream(self.seed, "labeled_order", epoch as u64);
        self.labeled.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_unlabeled(&mut self) -> String {
        use rand::seq::SliceRandom;
        if self.unlabeled_cursor >= self.unlabeled_order.len() {
            self.unlabeled_order = self.unlabeled_pool.clone();
            let mut rng = stream(self.seed, "unlabeled_order", self.reshuffles);
            self.unlabeled_order.shuffle(&mut rng);
            self.reshuffles += 1;
            self.unlabeled_cursor = 0;
        }
        let id = self.unlabeled_order[self.unlabeled_cursor].clone();
        self.unlabeled_cursor += 1;
        id
    }

    /// Next `(labeled, unlabeled)` id batch, or `None` when the labeled pool
    /// is exhausted for this epoch.
    fn next_batch(&mut self) -> Option<(Vec<String>, Vec<String>)> {
        if self.cursor >= self.labeled.len() {
            return None;
        }
        let end = (self.cursor + self.b_labeled).min(self.labeled.len());
        let labeled: Vec<String> = self.labeled[self.cursor..end].to_vec();
        self.cursor = end;
        let unlabeled = if self.unlabeled_pool.is_empty() {
            Vec::new()
        } else {
            (0..self.b_unlabeled).map(|_| self.next_unlabeled()).collect()
        };
        Some((labeled, unlabeled))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cr: f64,
    pub l_sim: f64,
    pub l_total: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct BestRecord {
    pub epoch: usize,
    pub accuracy: f64,
    pub weights: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub checkpoint: Option<PathBuf>,
}

pub struct TrainState {
    /// Weights after the final epoch (not necessarily the best).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best: BestRecord,
}

pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Run the full training loop for one split.
///
/// With `out` set, the per-epoch CSV log is appended and flushed as epochs
/// complete (so a divergence abort preserves the partial log) and the
/// best-by-validation checkpoint is kept up to date on disk.
pub fn fit(
    dataset: &Dataset,
    plan: &SplitPlan,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    model_cfg.validate()?;
    plan.validate()?;
    if plan.labeled_train.is_empty() {
        return Err(Error::Config("split has no labeled training samples".into()));
    }
    if plan.validation.is_empty() {
        return Err(Error::Config("split has no validation samples".into()));
    }
    if model_cfg.classes != dataset.label_space.count() {
        return Err(Error::Config(format!(
            "model expects {} classes but the dataset defines {}",
            model_cfg.classes,
            dataset.label_space.count()
        )));
    }

    let eff = cfg.effective_weights();
    let need_second = eff.lambda_cr > 0.0 || eff.lambda_sim > 0.0;
    // Unlabeled data only participates through the consistency/similarity
    // terms; with both inactive the pool is skipped entirely, which also
    // keeps the rng streams aligned with a plain supervised run.
    let use_unlabeled = need_second && !plan.unlabeled_train.is_empty();

    let ratio = plan.ratio.unwrap_or(0) as usize;
    let b_unlabeled = cfg.batch_size_unlabeled.unwrap_or_else(|| {
        (cfg.batch_size_labeled * ratio.max(1)).min(MAX_DERIVED_UNLABELED_BATCH)
    });

    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut composer = BatchComposer::new(
        plan.labeled_train.clone(),
        if use_unlabeled { plan.unlabeled_train.clone() } else { Vec::new() },
        cfg.batch_size_labeled,
        b_unlabeled,
        cfg.seed,
    );
    let mut rng_transform = stream(cfg.seed, "view_transform", 0);
    let mut rng_noise1 = stream(cfg.seed, "view_noise_primary", 0);
    let mut rng_noise2 = stream(cfg.seed, "view_noise_secondary", 0);

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(EPOCH_LOG_FILE);
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "epoch,l_CE,l_CR,l_Sim,l_total,val_accuracy")
                .map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestRecord> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        composer.start_epoch(epoch);

        let mut sums = (0.0, 0.0, 0.0); // ce*n_labeled, cr*n_total, sim*n_total
        let mut counts = (0usize, 0usize);

        while let Some((labeled_ids, unlabeled_ids)) = composer.next_batch() {
            let mut batch = Vec::with_capacity(labeled_ids.len() + unlabeled_ids.len());
            for id in &labeled_ids {
                let (image, label) = dataset.labeled_example(id)?;
                batch.push(prepare_sample(
                    image,
                    Some(label),
                    cfg.variant,
                    need_second,
                    &cfg.transform,
                    &cfg.noise,
                    &mut rng_transform,
                    &mut rng_noise1,
                    &mut rng_noise2,
                ));
            }
            for id in &unlabeled_ids {
                let image = dataset.unlabeled_example(id)?;
                batch.push(prepare_sample(
                    image,
                    None,
                    cfg.variant,
                    need_second,
                    &cfg.transform,
                    &cfg.noise,
                    &mut rng_transform,
                    &mut rng_noise1,
                    &mut rng_noise2,
                ));
            }

            model.zero_grads();
            let losses = batch_gradients(&mut model, &batch, &eff, cfg.consistency_norm)
                .map_err(|e| match e {
                    Error::Divergence { ce, cr, sim, .. } => {
                        Error::Divergence { epoch, lr, ce, cr, sim }
                    }
                    other => other,
                })?;
            if !losses.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    lr,
                    ce: losses.ce,
                    cr: losses.cr,
                    sim: losses.sim,
                });
            }
            model.sgd_step(lr);

            sums.0 += losses.ce * losses.n_labeled as f64;
            sums.1 += losses.cr * losses.n_total as f64;
            sums.2 += losses.sim * losses.n_total as f64;
            counts.0 += losses.n_labeled;
            counts.1 += losses.n_total;
        }

        let l_ce = sums.0 / counts.0 as f64;
        let l_cr = sums.1 / counts.1 as f64;
        let l_sim = sums.2 / counts.1 as f64;
        let l_total = total_loss(l_ce, l_cr, l_sim, &eff).map_err(|e| match e {
            Error::Divergence { ce, cr, sim, .. } => Error::Divergence { epoch, lr, ce, cr, sim },
            other => other,
        })?;

        let val_accuracy = eval::accuracy(&model, dataset, &plan.validation)?;
        let record = EpochRecord { epoch, l_ce, l_cr, l_sim, l_total, val_accuracy };
        history.push(record);

        if let Some((f, path)) = log.as_mut() {
            writeln!(
                f,
                "{epoch},{l_ce},{l_cr},{l_sim},{l_total},{val_accuracy}"
            )
            .map_err(|e| Error::io(path.as_path(), e))?;
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }

        let improved = best.as_ref().is_none_or(|b| val_accuracy > b.accuracy);
        if improved {
            let checkpoint_path = match out {
                Some(dir) => {
                    let path = dir.join(CHECKPOINT_FILE);
                    let mut meta = BTreeMap::new();
                    meta.insert("epoch".to_string(), epoch.to_string());
                    meta.insert("val_accuracy".to_string(), val_accuracy.to_string());
                    meta.insert("variant".to_string(), cfg.variant.to_string());
                    meta.insert("seed".to_string(), cfg.seed.to_string());
                    meta.insert("fold".to_string(), plan.fold_index.to_string());
                    checkpoint::save_model(&path, &model, &meta)?;
                    Some(path)
                }
                None => None,
            };
            best = Some(BestRecord {
                epoch,
                accuracy: val_accuracy,
                weights: model.export_weights(),
                checkpoint: checkpoint_path,
            });
        }
    }

    Ok(TrainState { model, history, best: best.expect("at least one epoch ran") })
}
