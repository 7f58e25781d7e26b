//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Run with `cargo test --test acceptance`
//! (slow criteria included) or as part of the full workspace tests.

use std::collections::HashMap;
use std::time::Instant;

use hetseg_core::labels::{LabelAvailability, LabelSet};
use hetseg_core::losses::gradcheck::{run as run_gradcheck, GradCheckConfig};
use hetseg_core::losses::{
    longitudinal_loss, spatial_loss, total_loss, volumetric_loss, ConstraintForm,
    CurriculumSchedule, LossComponents, LossOptions, LossWeights, VolumetricParams,
};
use hetseg_core::manifest::{
    load_manifest, DatasetFormat, DatasetManifest, RecordEntry, Split, SubjectRecord,
};
use hetseg_core::metrics::report::{evaluate_suite, EvalOptions};
use hetseg_core::metrics::{
    lesion_f1, paired_t_test, pearson, volume_trajectory, Connectivity,
};
use hetseg_core::model::{build_network, forward, ModelConfig};
use hetseg_core::phantom::{
    generate_multi_timepoint_subject, generate_subject, generate_suite, invert_timepoints,
    PhantomConfig, SuiteDataset,
};
use hetseg_core::trainer::augment::AugmentConfig;
use hetseg_core::trainer::{
    all_lesion_series, draw_sample, make_folds, predict, train_fold, train_one_batch,
    FoldPlan, SubjectRef, TrainConfig,
};
use hetseg_core::volume::{Dtype, Volume3D};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_gradient_oracle() {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        seeds: 20,
        edge: 6,
        step: 1e-4,
        tolerance: 1e-4,
        base_seed: 0x5eed,
    };
    let reports = run_gradcheck(&cfg, &[]).expect("gradcheck runs");
    assert_eq!(reports.len(), 4);
    for report in &reports {
        assert!(
            report.passed(),
            "criterion 1 FAIL: {report}"
        );
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "criterion 1 FAIL: gradcheck took {elapsed:?} (limit 60 s)"
    );
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    println!(
        "ACCEPTANCE 1 PASS: four losses, 20 instances each, max rel err {worst:.3e} < 1e-4, {elapsed:?}"
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_loss_algebra() {
    let unnorm = LossOptions {
        form: ConstraintForm::Gated,
        normalize: false,
    };
    let params = VolumetricParams::default();
    let uniform = |n: usize, v: f64| vec![v; n];

    // V1 = 100 from 800 voxels of 0.125 at 1 mm^3 per voxel.
    let p1 = uniform(800, 0.125);
    let upper = volumetric_loss(&p1, &uniform(800, 0.1625), 1.0, &params, 1.0, &unnorm)
        .unwrap()
        .value; // V2 = 130 -> (130 - 120)^2
    assert!((upper - 100.0).abs() < 1e-9, "upper branch: {upper}");
    let lower = volumetric_loss(&p1, &uniform(800, 0.0875), 1.0, &params, 1.0, &unnorm)
        .unwrap()
        .value; // V2 = 70 -> (70 - 80)^2
    assert!((lower - 100.0).abs() < 1e-9, "lower branch: {lower}");

    // Exactly zero strictly inside the band; at the band edges only
    // squared floating-point roundoff can remain.
    for v2 in [81.0, 90.0, 100.0, 110.0, 119.0] {
        let p2 = uniform(800, v2 / 800.0);
        let inside = volumetric_loss(&p1, &p2, 1.0, &params, 1.0, &unnorm)
            .unwrap()
            .value;
        assert_eq!(inside, 0.0, "V2 = {v2} must sit inside the band");
    }
    for v2 in [80.0, 120.0] {
        let p2 = uniform(800, v2 / 800.0);
        let edge = volumetric_loss(&p1, &p2, 1.0, &params, 1.0, &unnorm)
            .unwrap()
            .value;
        assert!(edge <= 1e-18, "edge V2 = {v2}: {edge}");
    }

    // Longitudinal hand value: y1=(1,0), y2=(0,1), p_n=(1,0), p_v=(1,0):
    // T1 = 1/2, T2 = 1/2, T3 = 0, T4 = 0 -> 1.0 (voxel-normalized form).
    let long = longitudinal_loss(
        &[1.0, 0.0],
        &[1.0, 0.0],
        Some(&[1.0, 0.0]),
        Some(&[0.0, 1.0]),
        &LossOptions::default(),
    )
    .unwrap()
    .value;
    assert!((long - 1.0).abs() < 1e-9, "longitudinal hand value: {long}");

    // Spatial hand value: one head lit at 3 voxels outside WM on an
    // 8-voxel image -> 3/8.
    let wm = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
    let mut p = vec![0.0; 8];
    p[5] = 1.0;
    p[6] = 1.0;
    p[7] = 1.0;
    let zero = vec![0.0; 8];
    let spat = spatial_loss([&p, &zero, &zero, &zero], &wm, &LossOptions::default())
        .unwrap()
        .value;
    assert!((spat - 3.0 / 8.0).abs() < 1e-9, "spatial hand value: {spat}");

    println!(
        "ACCEPTANCE 2 PASS: volumetric branches 100/100/0, longitudinal 1.0, spatial 3/8, all to 1e-9"
    );
}

// --------------------------------------------------------- shared fixtures

fn small_phantom(shape: [usize; 3]) -> PhantomConfig {
    PhantomConfig {
        shape,
        n_lesions_t1: 2..=3,
        n_new: 1..=1,
        n_vanish: 1..=1,
        lesion_radius_mm: 1.5..=2.5,
        noise_sigma: 0.02,
        ..Default::default()
    }
}

/// In-memory manifest with a given availability over generated subjects.
fn manifest_with(
    name: &str,
    format: DatasetFormat,
    availability: LabelAvailability,
    records: Vec<SubjectRecord>,
    test_last: bool,
) -> DatasetManifest {
    let n = records.len();
    let records = records
        .into_iter()
        .enumerate()
        .map(|(i, mut record)| {
            for ls in &mut record.labels {
                if !availability.all_t1 {
                    ls.all_t1 = None;
                }
                if !availability.all_t2 {
                    ls.all_t2 = None;
                }
                if !availability.new_t2 {
                    ls.new_t2 = None;
                }
                if !availability.vanish_t2 {
                    ls.vanish_t2 = None;
                }
            }
            RecordEntry {
                split: if test_last && i + 1 == n {
                    Split::Test
                } else {
                    Split::Train
                },
                record,
            }
        })
        .collect();
    DatasetManifest {
        name: name.to_string(),
        format,
        availability,
        records,
    }
}

/// The five heterogeneous dataset shapes, in memory, at a small scale.
fn five_shapes(cfg: &PhantomConfig, per_dataset: usize) -> Vec<DatasetManifest> {
    SuiteDataset::ALL
        .iter()
        .map(|ds| {
            let records: Vec<SubjectRecord> = (0..per_dataset)
                .map(|i| {
                    let seed = 100 * (1 + SuiteDataset::ALL.iter().position(|d| d == ds).unwrap())
                        as u64
                        + i as u64;
                    match ds {
                        SuiteDataset::Ph2016 => {
                            generate_multi_timepoint_subject(cfg, 1, seed).unwrap()
                        }
                        SuiteDataset::PhVan => {
                            invert_timepoints(&generate_subject(cfg, seed).unwrap()).unwrap()
                        }
                        _ => generate_subject(cfg, seed).unwrap(),
                    }
                })
                .collect();
            manifest_with(ds.name(), ds.format(), ds.availability(), records, false)
        })
        .collect()
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_curriculum() {
    let cfg = small_phantom([24, 24, 24]);
    let manifests = five_shapes(&cfg, 1);
    let model_cfg = ModelConfig {
        depth: 1,
        base_width: 2,
        patch_size: [16, 16, 16],
    };
    let train_cfg = TrainConfig {
        n_epoch: 8,
        batch_size: 2,
        folds: 1,
        augment: AugmentConfig::disabled(),
        seed: 11,
        ..Default::default()
    };
    // Paper weights.
    assert_eq!(train_cfg.weights.lambda_long, 5.0);
    assert_eq!(train_cfg.weights.lambda_vol, 1.0);
    assert_eq!(train_cfg.weights.lambda_spat, 1.0);

    let plans = make_folds(&manifests, 1, train_cfg.seed).unwrap();
    let fold = train_fold(&manifests, &plans[0], &model_cfg, &train_cfg, 0).unwrap();
    let schedule = train_cfg.schedule();
    let mut saw_active_constraint = false;
    for row in &fold.log {
        if !schedule.constraints_active(row.epoch) {
            assert_eq!(
                row.total.to_bits(),
                row.dice.to_bits(),
                "criterion 3 FAIL: epoch {} total != dice bit-exactly",
                row.epoch
            );
        } else {
            let expect = row.dice + 5.0 * row.long + 1.0 * row.vol + 1.0 * row.spat;
            assert_eq!(
                expect.to_bits(),
                row.total.to_bits(),
                "criterion 3 FAIL: epoch {} total != dice + 5*long + vol + spat",
                row.epoch
            );
            if row.long != 0.0 || row.vol != 0.0 || row.spat != 0.0 {
                saw_active_constraint = true;
            }
        }
    }
    assert!(
        saw_active_constraint,
        "criterion 3 FAIL: no nonzero constraint was ever active"
    );
    println!(
        "ACCEPTANCE 3 PASS: {} epochs, phase-1 total == dice bit-exactly, phase-2 total == dice + 5*long + vol + spat",
        fold.log.len()
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_heterogeneity_totality() {
    let cfg = small_phantom([24, 24, 24]);
    let manifests = five_shapes(&cfg, 1);
    let model_cfg = ModelConfig {
        depth: 1,
        base_width: 2,
        patch_size: [16, 16, 16],
    };
    // Constraint losses disabled: zero weights, and epoch 0 of a schedule
    // that never activates them anyway.
    let train_cfg = TrainConfig {
        n_epoch: 10,
        batch_size: 1,
        folds: 1,
        weights: LossWeights {
            lambda_long: 0.0,
            lambda_vol: 0.0,
            lambda_spat: 0.0,
        },
        augment: AugmentConfig::disabled(),
        seed: 3,
        ..Default::default()
    };
    let network = build_network(&model_cfg, 1).unwrap();

    for (d, manifest) in manifests.iter().enumerate() {
        let subjects = vec![SubjectRef { dataset: d, record: 0 }];
        let mut rng = ChaCha8Rng::seed_from_u64(40 + d as u64);
        let sample = draw_sample(
            &manifests,
            &subjects,
            &mut rng,
            model_cfg.patch_size,
            &train_cfg,
        )
        .unwrap_or_else(|e| panic!("criterion 4 FAIL: {} batch failed: {e}", manifest.name));
        let (stats, grads) = train_one_batch(&network, &[sample], &train_cfg, 0)
            .unwrap_or_else(|e| panic!("criterion 4 FAIL: {} step failed: {e}", manifest.name));
        assert!(
            grads.iter().any(|layer| layer.iter().any(|&g| g != 0.0)),
            "criterion 4 FAIL: {} produced no gradient at all",
            manifest.name
        );

        let availability = manifest.availability;
        let expected = [
            availability.all_t1,
            availability.all_t2,
            availability.new_t2,
            availability.vanish_t2,
        ];
        for (head, &has_label) in expected.iter().enumerate() {
            if !has_label {
                assert_eq!(
                    stats.head_grad_l2[head], 0.0,
                    "criterion 4 FAIL: {} head {head} has gradient without a label",
                    manifest.name
                );
            } else {
                assert!(
                    stats.head_grad_l2[head] > 0.0,
                    "criterion 4 FAIL: {} head {head} received no supervision",
                    manifest.name
                );
            }
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: one batch per manifest shape trains; head gradients match availability exactly"
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_architecture_contract() {
    let model_cfg = ModelConfig::default(); // depth 3, width 8, 32 cubed
    let network = build_network(&model_cfg, 5).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shape = (32, 32, 32);
    let mut vol = |lo: f32, hi: f32| {
        Volume3D::new(
            Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi)),
            [1.0, 1.0, 1.0],
        )
        .unwrap()
    };
    let x_t1 = vol(0.0, 1.0);
    let x_t2 = vol(0.0, 1.0);
    let mut label = Array3::zeros(shape);
    label[[10, 10, 10]] = 1.0;
    label[[20, 5, 12]] = 1.0;
    let bundle = hetseg_core::assembly::InputBundle {
        x_t1,
        x_t2,
        y_a_t1_channel: Volume3D {
            data: label,
            spacing: [1.0, 1.0, 1.0],
            dtype: Dtype::Uint8,
        },
        wm_t2: Volume3D {
            data: Array3::from_elem(shape, 1.0),
            spacing: [1.0, 1.0, 1.0],
            dtype: Dtype::Uint8,
        },
        availability: LabelAvailability::all(),
        interval_years: 1.0,
    };

    let before = forward(&network, &bundle).unwrap();
    let mut perturbed = bundle.clone();
    perturbed.y_a_t1_channel.data[[3, 3, 3]] = 1.0;
    perturbed.y_a_t1_channel.data[[10, 10, 10]] = 0.0;
    perturbed.y_a_t1_channel.data[[28, 28, 28]] = 1.0;
    let after = forward(&network, &perturbed).unwrap();

    let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
    assert_eq!(
        bits(&before.p_all_t1),
        bits(&after.p_all_t1),
        "criterion 5 FAIL: p_all_t1 changed under label-channel perturbation"
    );

    let n = 32 * 32 * 32;
    for (name, head) in [
        ("p_all_t1", &before.p_all_t1),
        ("p_all_t2", &before.p_all_t2),
        ("p_new_t2", &before.p_new_t2),
        ("p_vanish_t2", &before.p_vanish_t2),
    ] {
        assert_eq!(head.len(), n, "criterion 5 FAIL: {name} wrong shape");
        assert!(
            head.iter().all(|&p| (0.0..=1.0).contains(&p)),
            "criterion 5 FAIL: {name} out of [0,1]"
        );
    }
    println!(
        "ACCEPTANCE 5 PASS: p_all_t1 bit-invariant to label-channel perturbation; all heads input-shaped in [0,1]"
    );
}

// ---------------------------------------------------------------- criterion 6

/// Suite configuration for the desk-scale learning run: 5 datasets x 4
/// subjects at 64 cubed with lesion turnover between timepoints.
fn desk_suite_phantom() -> PhantomConfig {
    PhantomConfig {
        n_lesions_t1: 3..=5,
        n_new: 1..=2,
        n_vanish: 1..=2,
        lesion_radius_mm: 2.5..=4.5,
        noise_sigma: 0.01,
        ..Default::default()
    }
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.012,
        n_epoch: 200,
        batch_size: 5,
        folds: 1,
        lesion_patch_bias: 0.7,
        augment: AugmentConfig::flips_only(0.5),
        seed: 7,
        ..Default::default()
    }
}

#[test]
fn criterion_6_desk_scale_learning() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let outputs = generate_suite(&desk_suite_phantom(), 4, dir.path()).unwrap();
    let exposed: Vec<DatasetManifest> = outputs.iter().map(|o| o.manifest.clone()).collect();
    let oracle: Vec<DatasetManifest> = outputs
        .iter()
        .map(|o| load_manifest(&o.oracle_manifest_path).unwrap())
        .collect();

    let model_cfg = ModelConfig {
        depth: 3,
        base_width: 8,
        patch_size: [32, 32, 32],
    };
    let train_cfg = desk_train_config();
    let plans = make_folds(&exposed, 1, train_cfg.seed).unwrap();
    let fold = train_fold(&exposed, &plans[0], &model_cfg, &train_cfg, 0).unwrap();
    assert_eq!(fold.log.len(), 200);
    assert!(
        fold.log.last().unwrap().dice < fold.log.first().unwrap().dice,
        "criterion 6 FAIL: training Dice loss did not decrease"
    );

    let report = evaluate_suite(
        &[&fold.network],
        &exposed,
        &oracle,
        &EvalOptions {
            include_folds: false,
            overlap: 0.5,
            ..Default::default()
        },
    )
    .unwrap();

    let mut all_scores = Vec::new();
    let mut new_scores = Vec::new();
    for row in &report.rows {
        if row.metric != "dice" {
            continue;
        }
        match row.task.as_str() {
            "all_t1" | "all_t2" => all_scores.extend(row.per_case.iter().map(|c| c.value)),
            "new_t2" => new_scores.extend(row.per_case.iter().map(|c| c.value)),
            _ => {}
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all_dice = mean(&all_scores);
    let new_dice = mean(&new_scores);
    let elapsed = start.elapsed();
    assert!(
        all_dice >= 0.80,
        "criterion 6 FAIL: held-out all-lesion Dice {all_dice:.4} < 0.80 (cases: {all_scores:?})"
    );
    assert!(
        new_dice >= 0.50,
        "criterion 6 FAIL: held-out new-lesion Dice {new_dice:.4} < 0.50 (cases: {new_scores:?})"
    );
    assert!(
        elapsed.as_secs() < 30 * 60,
        "criterion 6 FAIL: runtime {elapsed:?} exceeds 30 minutes"
    );
    println!(
        "ACCEPTANCE 6 PASS: all-lesion Dice {all_dice:.4} >= 0.80 (n={}), new-lesion Dice {new_dice:.4} >= 0.50 (n={}), runtime {elapsed:?}",
        all_scores.len(),
        new_scores.len()
    );
}

// ---------------------------------------------------------------- criterion 7

struct AblationOutcome {
    outside_wm_fraction: f64,
    new_dice: f64,
    rho: f64,
}

/// Train one arm at reduced scale and measure the three directional
/// statistics on held-out subjects.
fn run_ablation_arm(seed: u64, weights: LossWeights) -> AblationOutcome {
    let phantom = PhantomConfig {
        shape: [32, 32, 32],
        n_lesions_t1: 2..=3,
        n_new: 1..=1,
        n_vanish: 1..=1,
        lesion_radius_mm: 1.8..=2.8,
        noise_sigma: 0.04,
        seed,
        ..Default::default()
    };
    // Full-label longitudinal training set so every head learns.
    let records: Vec<SubjectRecord> = (0..5)
        .map(|i| generate_subject(&phantom, 500 + i).unwrap())
        .collect();
    let manifest = manifest_with(
        "ablation",
        DatasetFormat::Longitudinal,
        LabelAvailability::all(),
        records,
        true,
    );
    let manifests = vec![manifest];

    let model_cfg = ModelConfig {
        depth: 2,
        base_width: 6,
        patch_size: [16, 16, 16],
    };
    let train_cfg = TrainConfig {
        learning_rate: 0.01,
        n_epoch: 120,
        batch_size: 3,
        folds: 1,
        weights,
        lesion_patch_bias: 0.7,
        augment: AugmentConfig::flips_only(0.5),
        seed,
        ..Default::default()
    };
    let plan = FoldPlan {
        train: (0..4).map(|record| SubjectRef { dataset: 0, record }).collect(),
        validation: Vec::new(),
    };
    let fold = train_fold(&manifests, &plan, &model_cfg, &train_cfg, 0).unwrap();

    // Held-out subject: outside-WM fraction and new-lesion Dice.
    let entry = &manifests[0].records[4];
    let preds = predict(
        &[&fold.network],
        &entry.record,
        manifests[0].availability,
        0.5,
    )
    .unwrap();
    let pred = &preds[0];
    let wm = entry.record.timepoints[1].wm_mask.as_ref().unwrap();
    let mut lit = 0usize;
    let mut outside = 0usize;
    for head in pred.heads() {
        for (&p, &w) in head.iter().zip(wm.data.iter()) {
            if p >= 0.5 {
                lit += 1;
                if w == 0.0 {
                    outside += 1;
                }
            }
        }
    }
    let outside_wm_fraction = if lit == 0 {
        0.0
    } else {
        outside as f64 / lit as f64
    };

    let spacing = entry.record.spacing();
    let new_mask = Volume3D::from_f64(&pred.p_new_t2, pred.shape, spacing)
        .unwrap()
        .binarize(0.5);
    let new_gt = entry.record.labels[0].new_t2.as_ref().unwrap();
    let new_dice = hetseg_core::metrics::dice_score(&new_mask, new_gt).unwrap();

    // Temporal consistency on 4-timepoint phantoms.
    let mut rhos = Vec::new();
    for t in 0..2 {
        let record = generate_multi_timepoint_subject(&phantom, 4, 900 + t).unwrap();
        let window_preds =
            predict(&[&fold.network], &record, LabelAvailability::all(), 0.5).unwrap();
        let pred_series = all_lesion_series(&record, &window_preds);
        let mut gt_series = vec![record.labels[0].all_t1.as_ref().unwrap().to_f64()];
        for ls in &record.labels {
            gt_series.push(ls.all_t2.as_ref().unwrap().to_f64());
        }
        let report = volume_trajectory(
            &pred_series,
            &gt_series,
            record.timepoints[0].image.voxel_volume_mm3(),
        )
        .unwrap();
        rhos.push(report.rho.unwrap_or(0.0));
    }
    let rho = rhos.iter().sum::<f64>() / rhos.len() as f64;

    AblationOutcome {
        outside_wm_fraction,
        new_dice,
        rho,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

#[test]
fn criterion_7_directional_ablations() {
    let seeds = [21u64, 22, 23];
    let zero = LossWeights {
        lambda_long: 0.0,
        lambda_vol: 0.0,
        lambda_spat: 0.0,
    };
    let with_spat = LossWeights {
        lambda_spat: 1.0,
        ..zero
    };
    let with_long = LossWeights {
        lambda_long: 5.0,
        ..zero
    };
    let with_vol = LossWeights {
        lambda_vol: 1.0,
        ..zero
    };

    let mut base_frac = Vec::new();
    let mut base_new = Vec::new();
    let mut base_rho = Vec::new();
    let mut spat_frac = Vec::new();
    let mut long_new = Vec::new();
    let mut vol_rho = Vec::new();
    for &seed in &seeds {
        let base = run_ablation_arm(seed, zero);
        base_frac.push(base.outside_wm_fraction);
        base_new.push(base.new_dice);
        base_rho.push(base.rho);
        spat_frac.push(run_ablation_arm(seed, with_spat).outside_wm_fraction);
        long_new.push(run_ablation_arm(seed, with_long).new_dice);
        vol_rho.push(run_ablation_arm(seed, with_vol).rho);
    }

    let base_frac_med = median(&mut base_frac);
    let spat_frac_med = median(&mut spat_frac);
    let base_new_med = median(&mut base_new);
    let long_new_med = median(&mut long_new);
    let base_rho_med = median(&mut base_rho);
    let vol_rho_med = median(&mut vol_rho);

    assert!(
        spat_frac_med < base_frac_med,
        "criterion 7 FAIL: spatial constraint did not reduce outside-WM fraction \
         (median {spat_frac_med:.4} vs baseline {base_frac_med:.4})"
    );
    assert!(
        long_new_med >= base_new_med,
        "criterion 7 FAIL: longitudinal constraint decreased new-lesion Dice \
         (median {long_new_med:.4} vs baseline {base_new_med:.4})"
    );
    assert!(
        vol_rho_med >= base_rho_med,
        "criterion 7 FAIL: volumetric constraint decreased trajectory rho \
         (median {vol_rho_med:.4} vs baseline {base_rho_med:.4})"
    );
    println!(
        "ACCEPTANCE 7 PASS: outside-WM fraction {base_frac_med:.4} -> {spat_frac_med:.4} (down), \
         new-lesion Dice {base_new_med:.4} -> {long_new_med:.4} (not down), \
         rho {base_rho_med:.4} -> {vol_rho_med:.4} (not down), medians over 3 seeds"
    );
}

// ---------------------------------------------------------------- criterion 8

/// Independent brute-force matcher: label propagation for components and
/// exhaustive pairwise overlap enumeration.
fn brute_force_match(
    pred: &Volume3D,
    gt: &Volume3D,
    connectivity: Connectivity,
    min_overlap: usize,
) -> (usize, usize, usize, f64) {
    fn propagate(mask: &Volume3D, connectivity: Connectivity) -> Vec<usize> {
        let [n0, n1, n2] = mask.shape();
        let idx = |x: usize, y: usize, z: usize| (x * n1 + y) * n2 + z;
        let mut labels: Vec<usize> = mask
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if v != 0.0 { i + 1 } else { 0 })
            .collect();
        let offsets = connectivity.offsets();
        loop {
            let mut changed = false;
            for x in 0..n0 {
                for y in 0..n1 {
                    for z in 0..n2 {
                        if labels[idx(x, y, z)] == 0 {
                            continue;
                        }
                        let mut best = labels[idx(x, y, z)];
                        for off in &offsets {
                            let (nx, ny, nz) =
                                (x as isize + off[0], y as isize + off[1], z as isize + off[2]);
                            if nx < 0
                                || ny < 0
                                || nz < 0
                                || nx >= n0 as isize
                                || ny >= n1 as isize
                                || nz >= n2 as isize
                            {
                                continue;
                            }
                            let l = labels[idx(nx as usize, ny as usize, nz as usize)];
                            if l != 0 && l < best {
                                best = l;
                            }
                        }
                        if best != labels[idx(x, y, z)] {
                            labels[idx(x, y, z)] = best;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        labels
    }

    let pl = propagate(pred, connectivity);
    let gl = propagate(gt, connectivity);
    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for (&p, &g) in pl.iter().zip(&gl) {
        if p != 0 && g != 0 {
            *overlap.entry((p, g)).or_insert(0) += 1;
        }
    }
    let mut pred_ids: Vec<usize> = pl.iter().copied().filter(|&l| l != 0).collect();
    pred_ids.sort_unstable();
    pred_ids.dedup();
    let mut gt_ids: Vec<usize> = gl.iter().copied().filter(|&l| l != 0).collect();
    gt_ids.sort_unstable();
    gt_ids.dedup();

    let detected = gt_ids
        .iter()
        .filter(|&&g| {
            pred_ids
                .iter()
                .any(|&p| overlap.get(&(p, g)).copied().unwrap_or(0) >= min_overlap)
        })
        .count();
    let matched_pred = pred_ids
        .iter()
        .filter(|&&p| {
            gt_ids
                .iter()
                .any(|&g| overlap.get(&(p, g)).copied().unwrap_or(0) >= min_overlap)
        })
        .count();
    let tp = detected;
    let fp = pred_ids.len() - matched_pred;
    let missed = gt_ids.len() - tp;
    let f1 = if gt_ids.is_empty() && pred_ids.is_empty() {
        1.0
    } else if 2 * tp + fp + missed == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + missed) as f64
    };
    (tp, fp, missed, f1)
}

#[test]
fn criterion_8_metric_oracles() {
    // Lesion F1 vs brute force on 100 random mask pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for case in 0..100 {
        let density = rng.gen_range(0.005..0.10);
        let mut make = |d: f64| Volume3D {
            data: Array3::from_shape_fn((16, 16, 16), |_| {
                if rng.gen_bool(d) {
                    1.0
                } else {
                    0.0
                }
            }),
            spacing: [1.0, 1.0, 1.0],
            dtype: Dtype::Uint8,
        };
        let pred = make(density);
        let gt = make(density);
        let ours = lesion_f1(&pred, &gt, Connectivity::TwentySix, 1).unwrap();
        let (tp, fp, missed, f1) =
            brute_force_match(&pred, &gt, Connectivity::TwentySix, 1);
        assert_eq!(
            (ours.tp, ours.fp, ours.missed),
            (tp, fp, missed),
            "criterion 8 FAIL: counts diverge from brute force on case {case}"
        );
        assert_eq!(ours.f1, f1, "criterion 8 FAIL: F1 diverges on case {case}");
    }

    // Pearson vs the direct formula.
    let a = [2.0, 4.0, 5.0, 9.0];
    let b = [1.0, 2.0, 3.0, 4.0];
    let (ma, mb) = (5.0, 2.5);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    let direct = cov / (va * vb).sqrt();
    let got = pearson(&a, &b).unwrap();
    assert!(
        (got - direct).abs() < 1e-9,
        "criterion 8 FAIL: Pearson {got} vs direct {direct}"
    );

    // Paired t-test hand example: differences (1, 2, 3).
    let t = paired_t_test(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
    assert!(
        (t.t - 3.4641016151).abs() < 1e-3,
        "criterion 8 FAIL: t = {}",
        t.t
    );
    assert!(
        (t.p_value - 0.0742).abs() < 1e-3,
        "criterion 8 FAIL: p = {}",
        t.p_value
    );
    println!(
        "ACCEPTANCE 8 PASS: lesion F1 exact vs brute force on 100 pairs; Pearson to 1e-9; t = {:.4}, p = {:.4} to 1e-3",
        t.t, t.p_value
    );
}

// ---------------------------------------------------------------- criterion 9

fn snapshot_files(dir: &std::path::Path, suffixes: &[&str]) -> Vec<(String, Vec<u8>)> {
    fn walk(
        base: &std::path::Path,
        dir: &std::path::Path,
        suffixes: &[&str],
        out: &mut Vec<(String, Vec<u8>)>,
    ) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(base, &path, suffixes, out);
            } else {
                let name = path.to_string_lossy().to_string();
                if suffixes.iter().any(|s| name.ends_with(s)) {
                    let rel = path
                        .strip_prefix(base)
                        .unwrap()
                        .to_string_lossy()
                        .to_string();
                    out.push((rel, std::fs::read(&path).unwrap()));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, suffixes, &mut out);
    out
}

fn pipeline_once(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    use hetseg_core::trainer::{save_ensemble, train_ensemble};

    let phantom = small_phantom([32, 32, 32]);
    let data = root.join("data");
    let outputs = generate_suite(&phantom, 2, &data).unwrap();
    let exposed: Vec<DatasetManifest> = outputs.iter().map(|o| o.manifest.clone()).collect();
    let oracle: Vec<DatasetManifest> = outputs
        .iter()
        .map(|o| load_manifest(&o.oracle_manifest_path).unwrap())
        .collect();

    let model_cfg = ModelConfig {
        depth: 2,
        base_width: 3,
        patch_size: [16, 16, 16],
    };
    let train_cfg = TrainConfig {
        n_epoch: 12,
        batch_size: 2,
        folds: 1,
        augment: AugmentConfig::flips_only(0.5),
        seed: 77,
        ..Default::default()
    };
    let folds = train_ensemble(&exposed, &model_cfg, &train_cfg).unwrap();
    let model_dir = root.join("model");
    save_ensemble(&folds, &model_cfg, &model_dir).unwrap();

    let report = evaluate_suite(
        &[&folds[0].network],
        &exposed,
        &oracle,
        &EvalOptions {
            include_folds: false,
            ..Default::default()
        },
    )
    .unwrap();
    std::fs::write(root.join("report.json"), report.to_json().unwrap()).unwrap();

    snapshot_files(root, &["manifest.json", "_loss.csv", "report.json", ".hsck"])
}

#[test]
fn criterion_9_reproducibility() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let snap_a = pipeline_once(dir_a.path());
    let snap_b = pipeline_once(dir_b.path());
    assert_eq!(snap_a.len(), snap_b.len());
    assert!(snap_a.iter().any(|(name, _)| name.ends_with("manifest.json")));
    assert!(snap_a.iter().any(|(name, _)| name.ends_with("_loss.csv")));
    assert!(snap_a.iter().any(|(name, _)| name.ends_with("report.json")));
    for ((name_a, bytes_a), (name_b, bytes_b)) in snap_a.iter().zip(&snap_b) {
        assert_eq!(name_a, name_b);
        assert_eq!(
            bytes_a, bytes_b,
            "criterion 9 FAIL: {name_a} differs between identical runs"
        );
    }
    println!(
        "ACCEPTANCE 9 PASS: synth -> train -> eval twice with one seed: {} files hash-identical (manifests, loss logs, report, checkpoints)",
        snap_a.len()
    );
}
