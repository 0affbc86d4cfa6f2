// Scratch harness for sizing the slow acceptance runs. Not part of the build.
use std::time::Instant;

use weedssl_core::data::{
    apply_label_scarcity, build_unlabeled_pool, generate_synthetic, stratified_kfold, Dataset,
    SplitPlan,
};
use weedssl_core::losses::{consistency_pair_grad, consistency_pair_loss, ConsistencyNorm};
use weedssl_core::model::{Model, ModelConfig};
use weedssl_core::rng::stream;
use weedssl_core::trainer::{fit, TrainConfig, Variant};
use weedssl_core::{eval, Result};

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn c5_plan(n_per_class: usize) -> Result<(Dataset, SplitPlan)> {
    let dataset = generate_synthetic(n_per_class, 9, 64, 20_250_825)?;
    let folds = stratified_kfold(&dataset, 5, 11)?;
    let plan = apply_label_scarcity(&folds[0], &dataset, 0.10, 11)?;
    let plan = build_unlabeled_pool(&plan, 5, 0, 11)?;
    Ok((dataset, plan))
}

fn c5(args: &[String]) -> Result<()> {
    let epochs: usize = args.get(2).map_or(10, |s| s.parse().unwrap());
    let n_per_class: usize = args.get(3).map_or(50, |s| s.parse().unwrap());
    let n_seeds: u64 = args.get(4).map_or(3, |s| s.parse().unwrap());
    let b_u: usize = args.get(5).map_or(16, |s| s.parse().unwrap());
    let b_l: usize = args.get(6).map_or(8, |s| s.parse().unwrap());
    let lr: f64 = args.get(7).map_or(0.01, |s| s.parse().unwrap());
    let filter = args.get(8).map_or("all", String::as_str);
    let gentle = args.get(9).is_some_and(|s| s == "gentle");
    let sigma: f64 = args.get(10).map_or(0.1, |s| s.parse().unwrap());
    let lam_cr: f64 = args.get(11).map_or(1.0, |s| s.parse().unwrap());
    let rawsum = args.get(12).is_some_and(|s| s == "rawsum");

    let t0 = Instant::now();
    let (dataset, plan) = c5_plan(n_per_class)?;
    println!(
        "setup {:.1}s  labeled {} unlabeled {} val {} test {}",
        t0.elapsed().as_secs_f64(),
        plan.labeled_train.len(),
        plan.unlabeled_train.len(),
        plan.validation.len(),
        plan.test.len()
    );

    let model_cfg = ModelConfig::default();
    let sigmas = [0.0, 0.05, 0.1, 0.125];
    let variants = [Variant::SslScr, Variant::Ssl, Variant::Supervised];
    let mut med_acc = Vec::new();
    let mut med_drop = Vec::new();
    for variant in variants {
        if filter != "all" && variant.as_str() != filter {
            med_acc.push(f64::NAN);
            med_drop.push(f64::NAN);
            continue;
        }
        let mut accs = Vec::new();
        let mut drops = Vec::new();
        for seed in 0..n_seeds {
            let mut cfg = TrainConfig {
                variant,
                base_lr: lr,
                epochs,
                batch_size_labeled: b_l,
                batch_size_unlabeled: Some(b_u),
                seed: 100 + seed,
                ..TrainConfig::default()
            };
            if gentle {
                cfg.transform = weedssl_core::augment::SimilarityTransformConfig {
                    rotation_range: 30.0,
                    shift_horizontal: 0.1,
                    shift_vertical: 0.1,
                    shift_probability: 0.5,
                    scale_min: 0.85,
                    scale_max: 1.0,
                    scale_probability: 0.5,
                    flip_horizontal_probability: 0.5,
                    flip_vertical_probability: 0.5,
                    saturation: weedssl_core::augment::FactorRange {
                        min: 0.8,
                        max: 1.25,
                        probability: 0.5,
                    },
                    brightness: weedssl_core::augment::FactorRange {
                        min: 0.8,
                        max: 1.25,
                        probability: 0.5,
                    },
                };
            }
            cfg.noise.std = sigma;
            cfg.weights.lambda_cr = lam_cr;
            if rawsum {
                cfg.consistency_norm = ConsistencyNorm::RawSum;
            }
            let t = Instant::now();
            let state = fit(&dataset, &plan, &model_cfg, &cfg, None)?;
            let mut best = Model::new(&model_cfg, 0)?;
            best.import_weights(&state.best.weights)?;
            let reports = eval::noise_sweep(&best, &dataset, &plan.test, &sigmas, 0.0, 11)?;
            let clean = reports[0].accuracy;
            let noisy = reports[3].accuracy;
            println!(
                "{:>10} seed {}  {:>6.1}s  best_ep {:>2} val {:.3}  test {:.3}  sweep {:.3}/{:.3}/{:.3}/{:.3}  drop {:+.3}",
                variant.as_str(),
                seed,
                t.elapsed().as_secs_f64(),
                state.best.epoch,
                state.best.accuracy,
                clean,
                reports[0].accuracy,
                reports[1].accuracy,
                reports[2].accuracy,
                noisy,
                clean - noisy,
            );
            accs.push(clean);
            drops.push(clean - noisy);
        }
        med_acc.push(median(&mut accs));
        med_drop.push(median(&mut drops));
        println!(
            "{:>10} median test {:.3}  median drop {:+.3}",
            variant.as_str(),
            med_acc.last().unwrap(),
            med_drop.last().unwrap()
        );
    }
    println!(
        "c5: scr {:.3} >= ssl {:.3} >= sup {:.3}?  gap {:.3} (need >= 0.02)",
        med_acc[0],
        med_acc[1],
        med_acc[2],
        med_acc[0] - med_acc[2]
    );
    println!("c6: sup drop {:.3} > scr drop {:.3}?", med_drop[2], med_drop[0]);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

fn c9(args: &[String]) -> Result<()> {
    let epochs: usize = args.get(2).map_or(10, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.05, |s| s.parse().unwrap());
    let batch: usize = args.get(4).map_or(10, |s| s.parse().unwrap());
    let res: usize = args.get(5).map_or(32, |s| s.parse().unwrap());

    let t0 = Instant::now();
    let dataset = generate_synthetic(12, 9, res, 42)?; // 108 ~ "100 synthetic images"
    let ids: Vec<String> = dataset.samples().iter().map(|s| s.id.clone()).collect();
    let model_cfg = ModelConfig::default();

    let mean_err = |model: &Model, ids: &[String]| -> Result<f64> {
        let mut total = 0.0;
        for id in ids {
            let x = dataset.image_for(id)?;
            let (_, bundle, _) = model.encoder.encode(&x)?;
            let (recon, _) = model.decoder.decode(&bundle)?;
            total += consistency_pair_loss(&x, &recon, ConsistencyNorm::PerElement)?;
        }
        Ok(total / ids.len() as f64)
    };

    let mut reductions = Vec::new();
    for seed in 0..3u64 {
        let mut model = Model::new(&model_cfg, 200 + seed)?;
        let initial = mean_err(&model, &ids)?;
        for epoch in 0..epochs {
            let mut order = ids.clone();
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(200 + seed, "labeled_order", epoch as u64));
            for chunk in order.chunks(batch) {
                model.zero_grads();
                for id in chunk {
                    let x = dataset.image_for(id)?;
                    let (_, bundle, enc_cache) = model.encoder.encode(&x)?;
                    let (recon, dec_cache) = model.decoder.decode(&bundle)?;
                    let scale = 1.0 / chunk.len() as f64;
                    let mut d_recon = consistency_pair_grad(&x, &recon, ConsistencyNorm::PerElement)?;
                    d_recon.mapv_inplace(|g| g * scale);
                    let d_taps = model.decoder.backward(&dec_cache, &d_recon);
                    model.encoder.backward(&enc_cache, None, Some(d_taps.as_slice()));
                }
                model.sgd_step(lr);
            }
        }
        let final_err = mean_err(&model, &ids)?;
        let reduction = 1.0 - final_err / initial;
        println!(
            "seed {}  initial {:.5}  final {:.5}  reduction {:.1}%  ({:.1}s)",
            seed,
            initial,
            final_err,
            100.0 * reduction,
            t0.elapsed().as_secs_f64()
        );
        reductions.push(reduction);
    }
    println!("c9 median reduction {:.1}% (need >= 50%)", 100.0 * median(&mut reductions));
    Ok(())
}

fn c1(_args: &[String]) -> Result<()> {
    // Time one fused forward+backward and one forward at criterion-1 scale.
    use weedssl_core::trainer::{batch_gradients, batch_losses, prepare_sample};
    let dataset = generate_synthetic(2, 9, 32, 7)?;
    let ids: Vec<String> = dataset.samples().iter().map(|s| s.id.clone()).collect();
    let model_cfg = ModelConfig::default();
    let mut model = Model::new(&model_cfg, 3)?;
    let cfg = TrainConfig { variant: Variant::SslScr, ..TrainConfig::default() };
    let mut rng_t = stream(1, "view_transform", 0);
    let mut rng_n1 = stream(1, "view_noise_primary", 0);
    let mut rng_n2 = stream(1, "view_noise_secondary", 0);
    let batch: Vec<_> = ids[..4]
        .iter()
        .map(|id| {
            let (img, lbl) = dataset.labeled_example(id).unwrap();
            prepare_sample(
                img,
                Some(lbl),
                cfg.variant,
                true,
                &cfg.transform,
                &cfg.noise,
                &mut rng_t,
                &mut rng_n1,
                &mut rng_n2,
            )
        })
        .collect();
    let t = Instant::now();
    let _ = batch_gradients(&mut model, &batch, &cfg.effective_weights(), cfg.consistency_norm)?;
    println!("batch_gradients(4 samples, 32px) {:.3}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let _ = batch_losses(&model, &batch, &cfg.effective_weights(), cfg.consistency_norm)?;
    println!("batch_losses {:.3}s", t.elapsed().as_secs_f64());
    println!("param tensors {}", model.export_weights().len());
    println!("param count {}", model.param_count());
    Ok(())
}

fn prof(_args: &[String]) -> Result<()> {
    let dataset = generate_synthetic(2, 9, 64, 7)?;
    let ids: Vec<String> = dataset.samples().iter().map(|s| s.id.clone()).collect();
    let model_cfg = ModelConfig::default();
    let mut model = Model::new(&model_cfg, 3)?;
    let x = dataset.image_for(&ids[0])?;

    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.encoder.encode(&x)?;
    }
    println!("encode          {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (_, bundle, enc_cache) = model.encoder.encode(&x)?;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.decoder.decode(&bundle)?;
    }
    println!("decode          {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (recon, dec_cache) = model.decoder.decode(&bundle)?;
    let d_recon = consistency_pair_grad(&x, &recon, ConsistencyNorm::PerElement)?;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = model.decoder.backward(&dec_cache, &d_recon);
    }
    println!("decoder bwd     {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let d_taps = model.decoder.backward(&dec_cache, &d_recon);
    let t = Instant::now();
    for _ in 0..reps {
        model.encoder.backward(&enc_cache, None, Some(d_taps.as_slice()));
    }
    println!("encoder bwd     {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    Ok(())
}

fn ceil(args: &[String]) -> Result<()> {
    // Fully-labeled supervised ceiling on the c5 dataset (fold 0).
    let epochs: usize = args.get(2).map_or(40, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(0.01, |s| s.parse().unwrap());
    let sigma: f64 = args.get(4).map_or(0.1, |s| s.parse().unwrap());
    let dataset = generate_synthetic(50, 9, 64, 20_250_825)?;
    let folds = stratified_kfold(&dataset, 5, 11)?;
    let plan = &folds[0];
    for idx in [0usize, 150, 200, 350] {
        let s = &dataset.samples()[idx];
        let sum: f64 = dataset.image_for(&s.id)?.iter().sum();
        println!("img {idx} ({}) checksum {sum:.3}", s.id);
    }
    println!(
        "labeled {} val {} test {}",
        plan.labeled_train.len(),
        plan.validation.len(),
        plan.test.len()
    );
    let mut cfg = TrainConfig {
        variant: Variant::Supervised,
        base_lr: lr,
        epochs,
        batch_size_labeled: 8,
        seed: 100,
        ..TrainConfig::default()
    };
    cfg.noise.std = sigma;
    let t = Instant::now();
    let state = fit(&dataset, plan, &ModelConfig::default(), &cfg, None)?;
    let mut best = Model::new(&ModelConfig::default(), 0)?;
    best.import_weights(&state.best.weights)?;
    let reports = eval::noise_sweep(&best, &dataset, &plan.test, &[0.0], 0.0, 11)?;
    println!(
        "ceiling: best_ep {} val {:.3} test {:.3}  ({:.0}s)",
        state.best.epoch,
        state.best.accuracy,
        reports[0].accuracy,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str).unwrap_or("c5") {
        "c5" => c5(&args),
        "c9" => c9(&args),
        "c1" => c1(&args),
        "ceil" => ceil(&args),
        "prof" => prof(&args),
        other => {
            eprintln!("unknown mode {other}");
            std::process::exit(2);
        }
    }
}
