//! Confusion-matrix metrics, noisy-inference sweeps, and (further down) the
//! ablation grid driver.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::augment::{add_gaussian_noise, NoiseSpec};
use crate::config::{ExperimentConfig, Manifest};
use crate::data::{apply_label_scarcity, build_unlabeled_pool, stratified_kfold, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::model::Model;
use crate::plot;
use crate::rng::stream;
use crate::tensor::{FeatureVector, ImageTensor};
use crate::trainer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// Rows = true class, cols = predicted class.
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: Array2::zeros((classes, classes)) }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[[true_class, predicted]] += 1;
    }

    pub fn tally(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[[true_class, predicted]]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.classes()).map(|i| self.counts[[i, i]]).sum();
        trace as f64 / self.total() as f64
    }

    /// True positives, false positives, false negatives for one class under
    /// one-vs-rest semantics.
    pub fn tp_fp_fn(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.counts[[class, class]];
        let fp = self.counts.column(class).sum() - tp;
        let fn_ = self.counts.row(class).sum() - tp;
        (tp, fp, fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced any of the three to 0 (class never
    /// predicted and/or absent from the evaluation set).
    pub degenerate: bool,
}

/// Experimental condition attached to a report, for tables and plots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Condition {
    pub variant: Option<String>,
    pub label_fraction: Option<f64>,
    pub sigma: Option<f64>,
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean of per-class F1 (the default aggregate).
    pub macro_f1: f64,
    /// Support-weighted mean, emitted alongside since either averaging
    /// convention is defensible; the two coincide on balanced sets.
    pub weighted_f1: f64,
    pub condition: Condition,
}

fn ratio_or_zero(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    assert!(cm.total() > 0, "metrics need at least one evaluated sample");
    let c = cm.classes();
    let mut per_class = Vec::with_capacity(c);
    let mut weighted = 0.0;
    for k in 0..c {
        let (tp, fp, fn_) = cm.tp_fp_fn(k);
        let (precision, p_deg) = ratio_or_zero(tp, tp + fp);
        let (recall, r_deg) = ratio_or_zero(tp, tp + fn_);
        let (f1, f_deg) = if precision + recall == 0.0 {
            (0.0, true)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        };
        per_class.push(ClassMetrics { precision, recall, f1, degenerate: p_deg || r_deg || f_deg });
        let support = (tp + fn_) as f64;
        weighted += f1 * support;
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64;
    MetricsReport {
        accuracy: cm.accuracy(),
        per_class,
        macro_f1,
        weighted_f1: weighted / cm.total() as f64,
        condition: Condition::default(),
    }
}

pub fn predict_logits(model: &Model, image: &ImageTensor) -> Result<FeatureVector> {
    let (feature, _skips, _cache) = model.encoder.encode(image)?;
    let (logits, _cache) = model.head.forward(&feature);
    Ok(logits)
}

/// Argmax with first-wins tie-breaking, so inference is fully deterministic.
pub fn argmax(v: &FeatureVector) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &Model, image: &ImageTensor) -> Result<usize> {
    Ok(argmax(&softmax(&predict_logits(model, image)?)))
}

/// Evaluate `ids` (clean images) into a confusion matrix.
pub fn confusion(model: &Model, dataset: &Dataset, ids: &[String]) -> Result<ConfusionMatrix> {
    confusion_with_noise(model, dataset, ids, None, 0)
}

/// Same, optionally corrupting each image with seeded Gaussian noise first.
/// The noise stream is derived from `eval_seed` alone, decoupled from any
/// training seed, so sweeps are comparable across variants.
pub fn confusion_with_noise(
    model: &Model,
    dataset: &Dataset,
    ids: &[String],
    noise: Option<&NoiseSpec>,
    eval_seed: u64,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.cfg.classes);
    let mut rng = noise.map(|spec| {
        // One stream per sigma value: stable no matter where the sigma sits
        // in a sweep list.
        stream(eval_seed, "eval_noise", (spec.std * 1e9).round() as u64)
    });
    for id in ids {
        let (image, label) = dataset.labeled_example(id)?;
        let image = match (&noise, &mut rng) {
            (Some(spec), Some(rng)) => add_gaussian_noise(&image, spec, rng),
            _ => image,
        };
        cm.record(label, predict(model, &image)?);
    }
    Ok(cm)
}

pub fn accuracy(model: &Model, dataset: &Dataset, ids: &[String]) -> Result<f64> {
    Ok(confusion(model, dataset, ids)?.accuracy())
}

/// One report per sigma, ascending. `sigma = 0` short-circuits to the exact
/// clean evaluation.
pub fn noise_sweep(
    model: &Model,
    dataset: &Dataset,
    ids: &[String],
    sigmas: &[f64],
    mean: f64,
    eval_seed: u64,
) -> Result<Vec<MetricsReport>> {
    if sigmas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("sigma list must be non-decreasing: {sigmas:?}")));
    }
    let mut reports = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let spec = NoiseSpec { mean, std: sigma };
        spec.validate()?;
        let noise = if sigma == 0.0 { None } else { Some(&spec) };
        let cm = confusion_with_noise(model, dataset, ids, noise, eval_seed)?;
        let mut report = metrics(&cm);
        report.condition.sigma = Some(sigma);
        reports.push(report);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Ablation grid: {variants} x {label fractions} x {ratios} x {folds}

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
const RESULTS_HEADER: &str =
    "variant,fraction,ratio,fold,sigma,accuracy,macro_f1,per_class_f1,manifest_hash";

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub variant: String,
    pub fraction: f64,
    pub ratio: u32,
    pub fold: usize,
    pub sigma: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub manifest_hash: String,
}

impl GridRow {
    fn to_csv(&self) -> String {
        let per_class: Vec<String> = self.per_class_f1.iter().map(f64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.fraction,
            self.ratio,
            self.fold,
            self.sigma,
            self.accuracy,
            self.macro_f1,
            per_class.join(";"),
            self.manifest_hash
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("malformed grid results row: {line}"));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(bad());
        }
        Ok(Self {
            variant: parts[0].to_string(),
            fraction: parts[1].parse().map_err(|_| bad())?,
            ratio: parts[2].parse().map_err(|_| bad())?,
            fold: parts[3].parse().map_err(|_| bad())?,
            sigma: parts[4].parse().map_err(|_| bad())?,
            accuracy: parts[5].parse().map_err(|_| bad())?,
            macro_f1: parts[6].parse().map_err(|_| bad())?,
            per_class_f1: parts[7]
                .split(';')
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
            manifest_hash: parts[8].to_string(),
        })
    }
}

pub fn read_results(path: &Path) -> Result<Vec<GridRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RESULTS_HEADER => {}
        _ => return Err(Error::Schema(format!("{} has an unexpected header", path.display()))),
    }
    lines.map(GridRow::from_csv).collect()
}

/// Train and evaluate one grid cell; one result row per sigma.
fn run_cell(
    dataset: &Dataset,
    base_plan: &SplitPlan,
    cell_cfg: &ExperimentConfig,
    fold: usize,
    hash: &str,
) -> Result<Vec<GridRow>> {
    let plan =
        apply_label_scarcity(base_plan, dataset, cell_cfg.split.fraction, cell_cfg.split.seed)?;
    let plan = build_unlabeled_pool(
        &plan,
        cell_cfg.split.ratio,
        cell_cfg.split.rotation_copies,
        cell_cfg.split.seed,
    )?;

    let cell_dir = cell_cfg.grid_dir().join("cells").join(&hash[..12]);
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    Manifest::for_run(cell_cfg, fold).write(&cell_dir.join("manifest.json"))?;

    let model_cfg = cell_cfg.model_config(dataset.label_space.count());
    let state = trainer::fit(dataset, &plan, &model_cfg, &cell_cfg.train, Some(&cell_dir))?;

    // Evaluate the best-by-validation weights, not the final epoch.
    let mut model = Model::new(&model_cfg, 0)?;
    model.import_weights(&state.best.weights)?;
    let reports = noise_sweep(
        &model,
        dataset,
        &plan.test,
        &cell_cfg.eval.sigmas,
        cell_cfg.eval.noise_mean,
        cell_cfg.eval.seed,
    )?;

    Ok(reports
        .into_iter()
        .map(|report| GridRow {
            variant: cell_cfg.train.variant.to_string(),
            fraction: cell_cfg.split.fraction,
            ratio: cell_cfg.split.ratio,
            fold,
            sigma: report.condition.sigma.unwrap(),
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            per_class_f1: report.per_class.iter().map(|m| m.f1).collect(),
            manifest_hash: hash.to_string(),
        })
        .collect())
}

/// Run the whole grid. Cells already present in `results.csv` are skipped
/// when `resume` is set (matched by manifest hash); a failed cell is logged
/// to `failures.csv` and skipped rather than aborting the grid. Returns every
/// row now on disk, including resumed ones.
pub fn run_ablation_grid(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let dir = cfg.grid_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let results_path = dir.join(RESULTS_FILE);
    let failures_path = dir.join(FAILURES_FILE);

    let mut rows: Vec<GridRow> = Vec::new();
    let mut done: HashSet<String> = HashSet::new();
    if resume && results_path.exists() {
        rows = read_results(&results_path)?;
        done = rows.iter().map(|r| r.manifest_hash.clone()).collect();
    }

    let mut out = std::fs::OpenOptions::new()
        .create(true)
        .append(!done.is_empty())
        .truncate(done.is_empty())
        .write(true)
        .open(&results_path)
        .map_err(|e| Error::io(&results_path, e))?;
    if done.is_empty() {
        writeln!(out, "{RESULTS_HEADER}").map_err(|e| Error::io(&results_path, e))?;
    }

    let dataset = cfg.load_dataset()?;
    let base_plans = stratified_kfold(&dataset, cfg.split.k, cfg.split.seed)?;
    let folds: Vec<usize> = if cfg.grid.folds.is_empty() {
        (0..cfg.split.k).collect()
    } else {
        cfg.grid.folds.clone()
    };

    for &variant in &cfg.grid.variants {
        for &fraction in &cfg.grid.fractions {
            for &ratio in &cfg.grid.ratios {
                for &fold in &folds {
                    let mut cell_cfg = cfg.clone();
                    cell_cfg.train.variant = variant;
                    cell_cfg.split.fraction = fraction;
                    cell_cfg.split.ratio = ratio;
                    let hash = Manifest::for_run(&cell_cfg, fold).hash();
                    if done.contains(&hash) {
                        continue;
                    }
                    match run_cell(&dataset, &base_plans[fold], &cell_cfg, fold, &hash) {
                        Ok(cell_rows) => {
                            for row in &cell_rows {
                                writeln!(out, "{}", row.to_csv())
                                    .map_err(|e| Error::io(&results_path, e))?;
                            }
                            out.flush().map_err(|e| Error::io(&results_path, e))?;
                            rows.extend(cell_rows);
                            done.insert(hash);
                        }
                        Err(e) => {
                            let mut f = std::fs::OpenOptions::new()
                                .create(true)
                                .append(true)
                                .open(&failures_path)
                                .map_err(|err| Error::io(&failures_path, err))?;
                            writeln!(
                                f,
                                "{variant},{fraction},{ratio},{fold},{hash},\"{e}\""
                            )
                            .map_err(|err| Error::io(&failures_path, err))?;
                        }
                    }
                }
            }
        }
    }

    if !rows.is_empty() {
        write_grid_plots(&dir, &rows)?;
    }
    Ok(rows)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Group rows by `(series key, x)` and average the accuracy.
fn series_of<K, X>(
    rows: &[GridRow],
    key: impl Fn(&GridRow) -> Option<(K, X)>,
) -> Vec<plot::Series>
where
    K: ToString + PartialEq,
    X: Into<f64> + Copy,
{
    let mut keys: Vec<K> = Vec::new();
    let mut buckets: Vec<Vec<(f64, Vec<f64>)>> = Vec::new();
    for row in rows {
        let Some((k, x)) = key(row) else { continue };
        let x: f64 = x.into();
        let idx = match keys.iter().position(|existing| *existing == k) {
            Some(i) => i,
            None => {
                keys.push(k);
                buckets.push(Vec::new());
                keys.len() - 1
            }
        };
        match buckets[idx].iter_mut().find(|(bx, _)| *bx == x) {
            Some((_, acc)) => acc.push(row.accuracy),
            None => buckets[idx].push((x, vec![row.accuracy])),
        }
    }
    keys.into_iter()
        .zip(buckets)
        .map(|(k, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            plot::Series {
                label: k.to_string(),
                points: points.into_iter().map(|(x, ys)| (x, mean(&ys))).collect(),
            }
        })
        .collect()
}

/// Summary figures over the results table: accuracy vs label fraction,
/// accuracy vs noise sigma, and per-variant ablation bars.
pub fn write_grid_plots(dir: &Path, rows: &[GridRow]) -> Result<()> {
    let sigma_min = rows.iter().map(|r| r.sigma).fold(f64::INFINITY, f64::min);

    let fraction_series = series_of(rows, |r| {
        (r.sigma == sigma_min).then(|| (r.variant.clone(), r.fraction))
    });
    plot::line_chart(
        &dir.join("fraction_sweep.svg"),
        "Accuracy vs labeled fraction",
        "labeled fraction",
        "test accuracy",
        &fraction_series,
    )?;

    let noise_series = series_of(rows, |r| Some((r.variant.clone(), r.sigma)));
    plot::line_chart(
        &dir.join("noise_sweep.svg"),
        "Accuracy vs inference noise",
        "noise sigma",
        "test accuracy",
        &noise_series,
    )?;

    let bars: Vec<(String, f64)> = fraction_series
        .iter()
        .map(|s| (s.label.clone(), mean(&s.points.iter().map(|p| p.1).collect::<Vec<_>>())))
        .collect();
    plot::bar_chart(
        &dir.join("ablation_bars.svg"),
        "Mean accuracy by variant (clean)",
        "test accuracy",
        &bars,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn diagonal_matrix_scores_perfectly() {
        let cm = ConfusionMatrix::tally(3, [(0, 0), (1, 1), (2, 2), (1, 1)]);
        let r = metrics(&cm);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.weighted_f1, 1.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 1.0 && !m.degenerate));
    }

    #[test]
    fn constant_classifier_fills_one_column() {
        let cm = ConfusionMatrix::tally(3, (0..3).flat_map(|t| [(t, 1), (t, 1)]));
        for t in 0..3 {
            assert_eq!(cm.count(t, 1), 2);
            assert_eq!(cm.count(t, 0), 0);
            assert_eq!(cm.count(t, 2), 0);
        }
        let r = metrics(&cm);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        // Classes 0 and 2 are never predicted: degenerate with zero precision.
        assert!(r.per_class[0].degenerate && r.per_class[2].degenerate);
        assert_eq!(r.per_class[0].precision, 0.0);
    }

    #[test]
    fn closed_form_class_arithmetic() {
        // Class 0: TP=6, FP=2, FN=4 -> P=0.75, R=0.6, F1=2/3.
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..6 {
            cm.record(0, 0);
        }
        for _ in 0..2 {
            cm.record(1, 0);
        }
        for _ in 0..4 {
            cm.record(0, 1);
        }
        let r = metrics(&cm);
        assert!((r.per_class[0].precision - 0.75).abs() < 1e-15);
        assert!((r.per_class[0].recall - 0.6).abs() < 1e-15);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matches_independent_per_class_loop() {
        let mut rng = stream(21, "eval_test", 0);
        for _ in 0..10 {
            let c = rng.random_range(2..6usize);
            let pairs: Vec<(usize, usize)> = (0..40)
                .map(|_| (rng.random_range(0..c), rng.random_range(0..c)))
                .collect();
            let cm = ConfusionMatrix::tally(c, pairs.iter().copied());
            let r = metrics(&cm);

            // Brute-force re-derivation straight from the pair list.
            let correct = pairs.iter().filter(|(t, p)| t == p).count();
            assert_eq!(r.accuracy, correct as f64 / pairs.len() as f64);
            for k in 0..c {
                let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count() as f64;
                let fp = pairs.iter().filter(|&&(t, p)| t != k && p == k).count() as f64;
                let fn_ = pairs.iter().filter(|&&(t, p)| t == k && p != k).count() as f64;
                let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
                let rc = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
                let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
                assert_eq!(r.per_class[k].precision, p);
                assert_eq!(r.per_class[k].recall, rc);
                assert_eq!(r.per_class[k].f1, f1);
            }
        }
    }

    #[test]
    fn argmax_breaks_ties_towards_first() {
        let v = ndarray::Array1::from_vec(vec![0.5, 0.5, 0.1]);
        assert_eq!(argmax(&v), 0);
        let v = ndarray::Array1::from_vec(vec![0.1, 0.7, 0.7]);
        assert_eq!(argmax(&v), 1);
    }

    fn tiny_grid_cfg(out_dir: &Path) -> ExperimentConfig {
        use crate::config::*;
        use crate::trainer::{TrainConfig, Variant};
        ExperimentConfig {
            dataset: DatasetSection {
                source: DatasetSource::Synthetic,
                resolution: 32,
                classes: 2,
                per_class: 9,
                seed: 71,
                ..Default::default()
            },
            split: SplitSection { k: 3, seed: 71, fraction: 0.3, ratio: 2, rotation_copies: 2 },
            grid: GridSection {
                variants: vec![Variant::Supervised, Variant::SslScr],
                fractions: vec![0.3],
                ratios: vec![2],
                folds: vec![0, 1],
            },
            train: TrainConfig {
                epochs: 1,
                batch_size_labeled: 4,
                batch_size_unlabeled: Some(2),
                seed: 71,
                ..Default::default()
            },
            eval: EvalSection { sigmas: vec![0.0], noise_mean: 0.0, seed: 5 },
            out_dir: out_dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn grid_emits_one_row_per_cell_and_resumes_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_grid_cfg(dir.path());
        let rows = run_ablation_grid(&cfg, false).unwrap();
        // 2 variants x 1 fraction x 1 ratio x 2 folds x 1 sigma.
        assert_eq!(rows.len(), 4);
        let hashes: HashSet<&str> = rows.iter().map(|r| r.manifest_hash.as_str()).collect();
        assert_eq!(hashes.len(), 4, "each cell carries a distinct manifest hash");
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        for name in ["fraction_sweep.svg", "noise_sweep.svg", "ablation_bars.svg"] {
            assert!(cfg.grid_dir().join(name).exists(), "missing {name}");
        }
        let on_disk = read_results(&cfg.grid_dir().join(RESULTS_FILE)).unwrap();
        assert_eq!(on_disk, rows);

        // Resume: wipe the per-cell artifacts; with every hash already in the
        // results table nothing retrains, so the cells directory stays gone.
        let cells = cfg.grid_dir().join("cells");
        std::fs::remove_dir_all(&cells).unwrap();
        let resumed = run_ablation_grid(&cfg, true).unwrap();
        assert_eq!(resumed, rows);
        assert!(!cells.exists(), "resume must not retrain completed cells");
    }

    #[test]
    fn failed_grid_cell_is_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_grid_cfg(dir.path());
        cfg.grid.variants = vec![crate::trainer::Variant::SslScr];
        cfg.grid.folds = vec![0];
        cfg.train.base_lr = 1e6; // diverges almost immediately
        cfg.train.epochs = 30;
        let rows = run_ablation_grid(&cfg, false).unwrap();
        assert!(rows.is_empty());
        let failures =
            std::fs::read_to_string(cfg.grid_dir().join(FAILURES_FILE)).unwrap();
        assert_eq!(failures.trim().lines().count(), 1);
        assert!(failures.contains("ssl-scr"));
        assert!(failures.to_lowercase().contains("diverge"), "failure names the cause: {failures}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_stay_in_unit_interval_and_macro_below_max(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        ) {
            let cm = ConfusionMatrix::tally(4, pairs);
            let r = metrics(&cm);
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!((0.0..=1.0).contains(&r.macro_f1));
            prop_assert!((0.0..=1.0).contains(&r.weighted_f1));
            let max_f1 = r.per_class.iter().map(|m| m.f1).fold(0.0, f64::max);
            prop_assert!(r.macro_f1 <= max_f1 + 1e-12);
            for m in &r.per_class {
                prop_assert!((0.0..=1.0).contains(&m.precision));
                prop_assert!((0.0..=1.0).contains(&m.recall));
                prop_assert!((0.0..=1.0).contains(&m.f1));
            }
        }

        #[test]
        fn metrics_are_permutation_equivariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            swap in (0usize..4, 0usize..4),
        ) {
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..4).collect();
                p.swap(swap.0, swap.1);
                p
            };
            let cm = ConfusionMatrix::tally(4, pairs.iter().copied());
            let relabeled = ConfusionMatrix::tally(
                4,
                pairs.iter().map(|&(t, p)| (perm[t], perm[p])),
            );
            let a = metrics(&cm);
            let b = metrics(&relabeled);
            prop_assert_eq!(a.accuracy, b.accuracy);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((a.weighted_f1 - b.weighted_f1).abs() < 1e-12);
            for k in 0..4 {
                prop_assert_eq!(a.per_class[k], b.per_class[perm[k]]);
            }
        }
    }
}
