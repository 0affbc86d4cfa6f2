//! Stratified k-fold planning and label-scarcity protocol.
//!
//! A [`SplitPlan`] assigns sample ids to four pairwise-disjoint roles:
//! labeled train, unlabeled train, validation, and test. Plans are built in
//! three steps — [`stratified_kfold`], [`apply_label_scarcity`],
//! [`build_unlabeled_pool`] — each a pure function of its inputs and a seed,
//! so identical inputs always yield identical plans. Plans serialize to JSON
//! for experiment reproducibility.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ROTATION_MARKER};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Per-fold assignment of sample ids to training/evaluation roles.
///
/// `label_fraction` is relative to the full dataset, not the train partition.
/// `ratio` is the requested labeled:unlabeled ratio (1:r), present once the
/// unlabeled pool has been built; `achieved_ratio` records what the pool
/// actually provided (lower than `ratio` when the pool ran short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub fold_index: usize,
    pub k: usize,
    pub seed: u64,
    pub label_fraction: f64,
    pub ratio: Option<u32>,
    pub achieved_ratio: Option<f64>,
    pub labeled_train: Vec<String>,
    pub unlabeled_train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitPlan {
    /// Total ids across all four roles.
    pub fn len(&self) -> usize {
        self.labeled_train.len()
            + self.unlabeled_train.len()
            + self.validation.len()
            + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check the pairwise-disjointness invariant across the four roles.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.len());
        for (role, ids) in [
            ("labeled_train", &self.labeled_train),
            ("unlabeled_train", &self.unlabeled_train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Contract(format!(
                        "id {id} appears in {role} and another role"
                    )));
                }
            }
        }
        if self.k < 3 || self.fold_index >= self.k {
            return Err(Error::Contract(format!(
                "fold_index {} out of range for k={}",
                self.fold_index, self.k
            )));
        }
        Ok(())
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)
            .map_err(|e| Error::Schema(format!("cannot serialize split plan: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let plan: SplitPlan = serde_json::from_reader(file)
            .map_err(|e| Error::Schema(format!("malformed split plan {}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Group sample ids by class, in dataset order. Errors if any sample is
/// unlabeled, since stratification needs a class for every id.
fn ids_by_class(dataset: &Dataset) -> Result<Vec<Vec<String>>> {
    let mut per_class = vec![Vec::new(); dataset.label_space.count()];
    for s in dataset.samples() {
        match s.label {
            Some(label) => per_class[label].push(s.id.clone()),
            None => {
                return Err(Error::Stratification(format!(
                    "sample {} is unlabeled; stratified splitting needs labels for every sample",
                    s.id
                )))
            }
        }
    }
    Ok(per_class)
}

/// Split `n` into `k` chunk sizes differing by at most one.
fn chunk_sizes(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    (0..k).map(|i| base + usize::from(i < extra)).collect()
}

/// Partition a dataset into `k` cross-validation plans.
///
/// Each class is shuffled independently and cut into `k` near-equal chunks.
/// Fold `i` takes chunk `i` as test, chunk `(i+1) % k` as validation, and the
/// remaining `k-2` chunks as (initially fully labeled) train — for `k = 5`
/// that is the 60/20/20 split. Test chunks are disjoint across folds and
/// their union covers the dataset.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 3 {
        return Err(Error::Config(format!(
            "k must be at least 3 to give train/validation/test roles, got {k}"
        )));
    }
    let per_class = ids_by_class(dataset)?;
    for (c, ids) in per_class.iter().enumerate() {
        if ids.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} samples but k={k} folds need at least {k}",
                ids.len()
            )));
        }
    }

    // Shuffle each class once, then slice the same chunks for every fold.
    let mut chunks: Vec<Vec<Vec<String>>> = Vec::with_capacity(per_class.len());
    for (c, ids) in per_class.into_iter().enumerate() {
        let mut ids = ids;
        ids.shuffle(&mut stream(seed, "kfold_shuffle", c as u64));
        let sizes = chunk_sizes(ids.len(), k);
        let mut class_chunks = Vec::with_capacity(k);
        let mut rest = ids;
        for &size in &sizes {
            let tail = rest.split_off(size);
            class_chunks.push(rest);
            rest = tail;
        }
        chunks.push(class_chunks);
    }

    let n = dataset.len() as f64;
    let mut plans = Vec::with_capacity(k);
    for fold in 0..k {
        let val_chunk = (fold + 1) % k;
        let mut labeled_train = Vec::new();
        let mut validation = Vec::new();
        let mut test = Vec::new();
        for class_chunks in &chunks {
            for (i, chunk) in class_chunks.iter().enumerate() {
                let target = if i == fold {
                    &mut test
                } else if i == val_chunk {
                    &mut validation
                } else {
                    &mut labeled_train
                };
                target.extend(chunk.iter().cloned());
            }
        }
        let plan = SplitPlan {
            fold_index: fold,
            k,
            seed,
            label_fraction: labeled_train.len() as f64 / n,
            ratio: None,
            achieved_ratio: None,
            labeled_train,
            unlabeled_train: Vec::new(),
            validation,
            test,
        };
        plan.validate()?;
        plans.push(plan);
    }
    Ok(plans)
}

/// Largest-remainder apportionment of `quota` over classes, capped by each
/// class's available count.
fn class_quotas(counts: &[usize], quota: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    assert!(quota <= total, "quota exceeds available samples");
    if total == 0 {
        return vec![0; counts.len()];
    }
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| quota as f64 * c as f64 / total as f64)
        .collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(counts)
        .map(|(&e, &cap)| (e.floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = quotas.iter().sum();
    // First pass hands out the remainders; further passes only run when
    // caps forced some class below its floor.
    while assigned < quota {
        let before = assigned;
        for &c in &order {
            if assigned == quota {
                break;
            }
            if quotas[c] < counts[c] {
                quotas[c] += 1;
                assigned += 1;
            }
        }
        assert!(assigned > before, "no spare capacity left");
    }
    quotas
}

/// Reduce the labeled train set to `round(label_fraction * N)` ids, chosen
/// stratified per class; the rest of the train partition moves to the
/// unlabeled pool with labels discarded.
///
/// `label_fraction` is a fraction of the full dataset, so it cannot exceed
/// the train partition's share (0.6 for k = 5).
pub fn apply_label_scarcity(
    plan: &SplitPlan,
    dataset: &Dataset,
    label_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(0.0..=1.0).contains(&label_fraction) {
        return Err(Error::Config(format!(
            "label_fraction must lie in [0, 1], got {label_fraction}"
        )));
    }
    if !plan.unlabeled_train.is_empty() {
        return Err(Error::Contract(
            "label scarcity must be applied before the unlabeled pool is built".into(),
        ));
    }
    let n = dataset.len();
    let quota = (label_fraction * n as f64).round() as usize;
    if quota > plan.labeled_train.len() {
        return Err(Error::Config(format!(
            "label_fraction {label_fraction} needs {quota} labeled samples but the train \
             partition holds only {}",
            plan.labeled_train.len()
        )));
    }

    let classes = dataset.label_space.count();
    let mut class_ids = vec![Vec::new(); classes];
    for id in &plan.labeled_train {
        let sample = dataset
            .get(id)
            .ok_or_else(|| Error::Schema(format!("plan references unknown id {id}")))?;
        let label = sample.label.ok_or_else(|| {
            Error::Stratification(format!("train sample {id} has no label to stratify by"))
        })?;
        class_ids[label].push(id.clone());
    }
    let counts: Vec<usize> = class_ids.iter().map(Vec::len).collect();
    let quotas = class_quotas(&counts, quota);

    let mut keep = HashSet::with_capacity(quota);
    for (c, ids) in class_ids.iter_mut().enumerate() {
        ids.shuffle(&mut stream(seed, "label_scarcity", c as u64));
        for id in ids.iter().take(quotas[c]) {
            keep.insert(id.clone());
        }
    }

    let mut labeled = Vec::with_capacity(quota);
    let mut unlabeled = Vec::with_capacity(plan.labeled_train.len() - quota);
    for id in &plan.labeled_train {
        if keep.contains(id) {
            labeled.push(id.clone());
        } else {
            unlabeled.push(id.clone());
        }
    }

    let out = SplitPlan {
        label_fraction,
        labeled_train: labeled,
        unlabeled_train: unlabeled,
        ..plan.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Expand the de-labeled pool with rotated virtual copies and select ids so
/// that labeled:unlabeled approaches `1:ratio`.
///
/// Each virtual copy gets an id of the form `{base}#rot{millidegrees}` with
/// an angle drawn uniformly from (-180°, 180°); the pixels are materialized
/// lazily by [`Dataset::image_for`]. `rotation_copies = 0` disables the
/// expansion. When the pool is smaller than `ratio x labeled` even after
/// expansion, the whole pool is used and `achieved_ratio` records the
/// shortfall — callers should compare it against `ratio` and warn.
pub fn build_unlabeled_pool(
    plan: &SplitPlan,
    ratio: u32,
    rotation_copies: u32,
    seed: u64,
) -> Result<SplitPlan> {
    if ratio == 0 {
        return Err(Error::Config("unlabeled ratio must be positive".into()));
    }
    if plan.unlabeled_train.is_empty() {
        return Err(Error::Contract(
            "cannot build an unlabeled pool: no de-labeled samples in the plan".into(),
        ));
    }

    let mut pool: Vec<String> = plan.unlabeled_train.clone();
    if rotation_copies > 0 {
        let mut rng = stream(seed, "pool_rotation", 0);
        let mut taken: HashSet<String> = pool.iter().cloned().collect();
        for base in &plan.unlabeled_train {
            for _ in 0..rotation_copies {
                // Redraw on the (unlikely) millidegree collision so ids stay unique.
                let id = loop {
                    let millideg: i64 =
                        (rng.random_range(-180.0_f64..180.0) * 1000.0).round() as i64;
                    let id = format!("{base}{ROTATION_MARKER}{millideg}");
                    if !taken.contains(&id) {
                        break id;
                    }
                };
                taken.insert(id.clone());
                pool.push(id);
            }
        }
    }

    let need = ratio as usize * plan.labeled_train.len();
    pool.shuffle(&mut stream(seed, "pool_select", 0));
    pool.truncate(need);
    let achieved = pool.len() as f64 / plan.labeled_train.len() as f64;

    let out = SplitPlan {
        ratio: Some(ratio),
        achieved_ratio: Some(achieved),
        unlabeled_train: pool,
        ..plan.clone()
    };
    out.validate()?;
    Ok(out)
}
