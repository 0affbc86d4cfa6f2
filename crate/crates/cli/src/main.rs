//! Command-line harness: prepare splits, train a fold, evaluate a
//! checkpoint, run the ablation grid. Every command is driven by one TOML
//! config; all randomness flows from the seeds recorded there, so reruns are
//! reproducible byte-for-byte (timestamps aside).
//!
//! Exit codes: 0 success, 1 config error, 2 runtime/training error, 3 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use weedssl_core::config::ExperimentConfig;
use weedssl_core::config::Manifest;
use weedssl_core::data::{apply_label_scarcity, build_unlabeled_pool, stratified_kfold, SplitPlan};
use weedssl_core::error::{Error, Result};
use weedssl_core::{checkpoint, eval, plot, trainer};

#[derive(Parser)]
#[command(name = "weedssl", version, about = "Semi-supervised weed classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the k-fold split plans (labeled/unlabeled/validation/test).
    Prepare(CommonArgs),
    /// Train one fold; writes checkpoint, epoch log and manifest.
    Train(CommonArgs),
    /// Evaluate a trained fold's checkpoint: clean metrics plus noise sweep.
    Evaluate(CommonArgs),
    /// Run the variants x fractions x ratios x folds ablation grid.
    Grid(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Fold index (required for train/evaluate, ignored by prepare/grid).
    #[arg(long, value_name = "N")]
    fold: Option<usize>,
    /// Override the training seed from the config. Split and evaluation
    /// seeds are left untouched so folds stay comparable across reruns.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Grid only: skip cells whose manifest hash is already in the results
    /// table.
    #[arg(long)]
    resume: bool,
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn require_fold(args: &CommonArgs) -> Result<usize> {
    args.fold.ok_or_else(|| Error::Config("this command needs --fold N".into()))
}

fn cmd_prepare(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let dir = cfg.split_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let plans = stratified_kfold(&dataset, cfg.split.k, cfg.split.seed)?;
    for (fold, base) in plans.iter().enumerate() {
        let plan = apply_label_scarcity(base, &dataset, cfg.split.fraction, cfg.split.seed)?;
        let plan = build_unlabeled_pool(
            &plan,
            cfg.split.ratio,
            cfg.split.rotation_copies,
            cfg.split.seed,
        )?;
        if let (Some(achieved), Some(target)) = (plan.achieved_ratio, plan.ratio) {
            if achieved + 1e-9 < target as f64 {
                eprintln!(
                    "warning: fold {fold}: unlabeled pool reaches 1:{achieved:.2}, \
                     short of the requested 1:{target}"
                );
            }
        }
        plan.to_json_file(&cfg.split_file(fold))?;
    }
    println!("wrote {} split plans to {}", plans.len(), dir.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let plan = SplitPlan::from_json_file(&cfg.split_file(fold))?;
    let model_cfg = cfg.model_config(dataset.label_space.count());
    let out = cfg.train_dir(fold);

    let manifest = Manifest::for_run(cfg, fold);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    manifest.write(&out.join("manifest.json"))?;

    let state = trainer::fit(&dataset, &plan, &model_cfg, &cfg.train, Some(&out))?;
    println!(
        "fold {fold}: best validation accuracy {:.4} at epoch {} (manifest {})",
        state.best.accuracy,
        state.best.epoch,
        &manifest.hash()[..12]
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, fold: usize) -> Result<()> {
    let dataset = cfg.load_dataset()?;
    let plan = SplitPlan::from_json_file(&cfg.split_file(fold))?;
    let ckpt_path = cfg.train_dir(fold).join(trainer::CHECKPOINT_FILE);
    let (model, header) = checkpoint::restore_model(&ckpt_path)?;

    let expected = cfg.model_config(dataset.label_space.count());
    if header.model != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different architecture than this config",
            ckpt_path.display()
        )));
    }

    let reports = eval::noise_sweep(
        &model,
        &dataset,
        &plan.test,
        &cfg.eval.sigmas,
        cfg.eval.noise_mean,
        cfg.eval.seed,
    )?;

    let dir = cfg.eval_dir(fold);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let csv_path = dir.join("metrics.csv");
    let mut csv = String::from("sigma,accuracy,macro_f1,weighted_f1,per_class_f1\n");
    for r in &reports {
        let per_class: Vec<String> =
            r.per_class.iter().map(|m| m.f1.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.condition.sigma.unwrap(),
            r.accuracy,
            r.macro_f1,
            r.weighted_f1,
            per_class.join(";")
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let series = vec![
        plot::Series {
            label: "accuracy".into(),
            points: reports
                .iter()
                .map(|r| (r.condition.sigma.unwrap(), r.accuracy))
                .collect(),
        },
        plot::Series {
            label: "macro F1".into(),
            points: reports
                .iter()
                .map(|r| (r.condition.sigma.unwrap(), r.macro_f1))
                .collect(),
        },
    ];
    plot::line_chart(
        &dir.join("noise_sweep.svg"),
        &format!("Fold {fold}: metrics under inference noise"),
        "noise sigma",
        "metric",
        &series,
    )?;

    for r in &reports {
        println!(
            "sigma {:>6.3}: accuracy {:.4}, macro F1 {:.4}",
            r.condition.sigma.unwrap(),
            r.accuracy,
            r.macro_f1
        );
    }
    println!("reports in {}", dir.display());
    Ok(())
}

fn cmd_grid(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let rows = eval::run_ablation_grid(cfg, resume)?;
    println!("{} result rows in {}", rows.len(), cfg.grid_dir().display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(&load_config(args)?),
        Command::Train(args) => cmd_train(&load_config(args)?, require_fold(args)?),
        Command::Evaluate(args) => cmd_evaluate(&load_config(args)?, require_fold(args)?),
        Command::Grid(args) => cmd_grid(&load_config(args)?, args.resume),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
