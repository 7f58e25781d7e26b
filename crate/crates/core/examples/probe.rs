use hetseg_core::manifest::{load_manifest, DatasetManifest};
use hetseg_core::metrics::report::{evaluate_suite, EvalOptions};
use hetseg_core::model::ModelConfig;
use hetseg_core::phantom::{generate_suite, PhantomConfig};
use hetseg_core::trainer::augment::AugmentConfig;
use hetseg_core::trainer::{make_folds, train_fold, TrainConfig};

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let t0 = std::time::Instant::now();
    let out = tempfile::tempdir().unwrap();
    let ph = PhantomConfig {
        n_lesions_t1: 3..=5,
        n_new: 1..=2,
        n_vanish: 1..=2,
        lesion_radius_mm: 2.5..=4.5,
        noise_sigma: envf("NOISE", 0.01),
        ..Default::default()
    };
    let outputs = generate_suite(&ph, 4, out.path()).unwrap();
    let exposed: Vec<DatasetManifest> = outputs.iter().map(|o| o.manifest.clone()).collect();
    let oracle: Vec<DatasetManifest> = outputs
        .iter()
        .map(|o| load_manifest(&o.oracle_manifest_path).unwrap())
        .collect();
    println!("synth: {:?}", t0.elapsed());

    let model_cfg = ModelConfig {
        depth: 3,
        base_width: envu("W", 4),
        patch_size: [32, 32, 32],
    };
    let train_cfg = TrainConfig {
        learning_rate: envf("LR", 0.01),
        n_epoch: envu("EPOCHS", 200),
        batch_size: envu("BATCH", 2),
        folds: 1,
        lesion_patch_bias: envf("BIAS", 0.7),
        augment: AugmentConfig::flips_only(0.5),
        seed: 7,
        ..Default::default()
    };
    eprintln!("cfg: W={} LR={} BATCH={} BIAS={}", model_cfg.base_width, train_cfg.learning_rate, train_cfg.batch_size, train_cfg.lesion_patch_bias);
    let t1 = std::time::Instant::now();
    let plans = make_folds(&exposed, 1, train_cfg.seed).unwrap();
    let fold = train_fold(&exposed, &plans[0], &model_cfg, &train_cfg, 0).unwrap();
    println!("train {} iters: {:?}", train_cfg.n_epoch, t1.elapsed());
    println!("first dice {:.4} last dice {:.4}", fold.log[0].dice, fold.log.last().unwrap().dice);

    let t2 = std::time::Instant::now();
    let report = evaluate_suite(
        &[&fold.network],
        &exposed,
        &oracle,
        &EvalOptions { include_folds: false, overlap: 0.5, ..Default::default() },
    )
    .unwrap();
    println!("eval: {:?}", t2.elapsed());

    let mut all_scores = Vec::new();
    let mut new_scores = Vec::new();
    for row in &report.rows {
        if row.metric != "dice" || row.mean.is_none() {
            continue;
        }
        println!("{} {} mean {:.4} n {}", row.dataset, row.task, row.mean.unwrap(), row.n);
        match row.task.as_str() {
            "all_t1" | "all_t2" => all_scores.extend(row.per_case.iter().map(|c| c.value)),
            "new_t2" => new_scores.extend(row.per_case.iter().map(|c| c.value)),
            _ => {}
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("POOLED all-lesion dice {:.4} (n={})", mean(&all_scores), all_scores.len());
    println!("POOLED new-lesion dice {:.4} (n={})", mean(&new_scores), new_scores.len());
    println!("total: {:?}", t0.elapsed());
}
