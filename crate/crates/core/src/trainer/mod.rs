//! Training loop: curriculum-scheduled composite loss, subject-level
//! k-fold cross-validation, and ensemble prediction.
//!
//! An "epoch" is one optimizer step over a batch of randomly sampled
//! patches, the usual patch-based reading of epoch counts. Batches sample
//! subjects uniformly across all datasets, so heterogeneous supervision is
//! exercised continuously. Every random draw derives from
//! `(seed, fold, epoch)`, and per-sample work reduces in sample order, so
//! runs are bit-reproducible regardless of thread count.

pub mod adam;
pub mod augment;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{extract_patch, pack_inputs, sliding_windows, InputBundle};
use crate::error::{Error, Result};
use crate::exec;
use crate::labels::LabelSet;
use crate::losses::{
    longitudinal_loss, masked_dice_supervision, spatial_loss, total_loss, volumetric_loss,
    CurriculumSchedule, LossComponents, LossOptions, LossWeights, VolumetricParams,
};
use crate::manifest::{DatasetManifest, Split, SubjectRecord};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::model::{build_network, sliding_inference, ModelConfig, Network, PredictionBundle};
use adam::Adam;
use augment::{augment, AugmentConfig};

/// Optimization recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Batch iterations ("epochs" in the patch-sampling sense).
    pub n_epoch: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub weights: LossWeights,
    pub vol_params: VolumetricParams,
    /// Fraction of training after which constraint losses activate.
    pub activation_fraction: f64,
    pub loss_options: LossOptions,
    pub dice_smooth: f64,
    pub augment: AugmentConfig,
    /// Probability of centering a patch on a labeled lesion voxel.
    pub lesion_patch_bias: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            n_epoch: 200,
            batch_size: 2,
            folds: 5,
            weights: LossWeights::default(),
            vol_params: VolumetricParams::default(),
            activation_fraction: 0.5,
            loss_options: LossOptions::default(),
            dice_smooth: 1.0,
            augment: AugmentConfig::default(),
            lesion_patch_bias: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.folds == 0 || self.batch_size == 0 || self.n_epoch == 0 {
            return Err(Error::Config(
                "folds, batch_size, and n_epoch must be positive".into(),
            ));
        }
        self.vol_params.validate()?;
        self.schedule().validate()
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            n_epoch: self.n_epoch,
            activation_fraction: self.activation_fraction,
        }
    }
}

// -------------------------------------------------------------------- folds

/// Index of one subject inside a manifest list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubjectRef {
    pub dataset: usize,
    pub record: usize,
}

/// One train/validation partition over train-split subjects.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub train: Vec<SubjectRef>,
    pub validation: Vec<SubjectRef>,
}

/// Subject-level k-fold partitions, stratified per dataset.
///
/// Only train-split records participate. With `k = 1` the single plan
/// trains on everything and holds out nothing (the fast path).
pub fn make_folds(manifests: &[DatasetManifest], k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    let mut per_dataset: Vec<Vec<SubjectRef>> = Vec::new();
    for (d, manifest) in manifests.iter().enumerate() {
        let refs: Vec<SubjectRef> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == Split::Train)
            .map(|(r, _)| SubjectRef {
                dataset: d,
                record: r,
            })
            .collect();
        if refs.len() < k {
            return Err(Error::Config(format!(
                "dataset {} has {} training subject(s), fewer than {k} folds",
                manifest.name,
                refs.len()
            )));
        }
        per_dataset.push(refs);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut fold_validation: Vec<Vec<SubjectRef>> = vec![Vec::new(); k];
    for refs in &mut per_dataset {
        for i in (1..refs.len()).rev() {
            let j = rng.gen_range(0..=i);
            refs.swap(i, j);
        }
        for (i, r) in refs.iter().enumerate() {
            fold_validation[i % k].push(*r);
        }
    }

    let all: Vec<SubjectRef> = per_dataset.into_iter().flatten().collect();
    let plans = (0..k)
        .map(|f| {
            let validation = fold_validation[f].clone();
            let train: Vec<SubjectRef> = if k == 1 {
                all.clone()
            } else {
                all.iter()
                    .copied()
                    .filter(|r| !validation.contains(r))
                    .collect()
            };
            FoldPlan {
                train,
                validation: if k == 1 { Vec::new() } else { validation },
            }
        })
        .collect();
    Ok(plans)
}

// ----------------------------------------------------------------- sampling

/// One ready-to-train patch: packed channels plus cropped labels.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub bundle: InputBundle,
    pub labels: LabelSet,
}

fn sample_origin(
    rng: &mut ChaCha8Rng,
    shape: [usize; 3],
    patch: [usize; 3],
    labels: &LabelSet,
    lesion_bias: f64,
) -> [isize; 3] {
    let max_origin = [
        shape[0] - patch[0],
        shape[1] - patch[1],
        shape[2] - patch[2],
    ];
    if rng.gen_bool(lesion_bias.clamp(0.0, 1.0)) {
        let present: Vec<&crate::volume::Volume3D> = labels.present().map(|(_, v)| v).collect();
        if !present.is_empty() {
            let mask = present[rng.gen_range(0..present.len())];
            let n = mask.count_nonzero();
            if n > 0 {
                let target = rng.gen_range(0..n);
                let mut seen = 0;
                let dims = mask.shape();
                for x in 0..dims[0] {
                    for y in 0..dims[1] {
                        for z in 0..dims[2] {
                            if mask.data[[x, y, z]] != 0.0 {
                                if seen == target {
                                    let center = [x, y, z];
                                    let mut origin = [0isize; 3];
                                    for a in 0..3 {
                                        let o = center[a] as isize - (patch[a] / 2) as isize;
                                        origin[a] = o.clamp(0, max_origin[a] as isize);
                                    }
                                    return origin;
                                }
                                seen += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    [
        rng.gen_range(0..=max_origin[0]) as isize,
        rng.gen_range(0..=max_origin[1]) as isize,
        rng.gen_range(0..=max_origin[2]) as isize,
    ]
}

/// Draw one training sample: subject, window, patch, augmentation.
pub fn draw_sample(
    manifests: &[DatasetManifest],
    subjects: &[SubjectRef],
    rng: &mut ChaCha8Rng,
    patch: [usize; 3],
    cfg: &TrainConfig,
) -> Result<TrainSample> {
    if subjects.is_empty() {
        return Err(Error::Config("no training subjects in this fold".into()));
    }
    let sref = subjects[rng.gen_range(0..subjects.len())];
    let manifest = &manifests[sref.dataset];
    let record = &manifest.records[sref.record].record;
    let windows = sliding_windows(record);
    let window = windows[rng.gen_range(0..windows.len())];
    let bundle = pack_inputs(record, window, manifest.availability)?;
    let label_index = if window.1 == window.0 { 0 } else { window.0 };
    let labels = record.labels.get(label_index).cloned().unwrap_or_default();

    let shape = bundle.shape();
    for a in 0..3 {
        if shape[a] < patch[a] {
            return Err(Error::Config(format!(
                "volume shape {shape:?} smaller than patch {patch:?}"
            )));
        }
    }
    let origin = sample_origin(rng, shape, patch, &labels, cfg.lesion_patch_bias);
    let patch_bundle = extract_patch(&bundle, origin, patch, false)?;
    let patch_labels = labels.crop(origin, patch, false)?;
    let augment_seed: u64 = rng.gen();
    let (bundle, labels) = augment(&patch_bundle, &patch_labels, &cfg.augment, augment_seed);
    Ok(TrainSample { bundle, labels })
}

// -------------------------------------------------------------- batch step

/// Per-batch diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub components: LossComponents,
    pub total: f64,
    /// L2 norm of the loss gradient reaching each prediction head, summed
    /// over the batch. Zero means the head received no supervision.
    pub head_grad_l2: [f64; 4],
}

fn label_as_f64(labels: &LabelSet) -> [Option<Vec<f64>>; 4] {
    [
        labels.all_t1.as_ref().map(|v| v.to_f64()),
        labels.all_t2.as_ref().map(|v| v.to_f64()),
        labels.new_t2.as_ref().map(|v| v.to_f64()),
        labels.vanish_t2.as_ref().map(|v| v.to_f64()),
    ]
}

struct SampleOutcome {
    components: LossComponents,
    grads: Vec<Vec<f64>>,
    head_l2: [f64; 4],
}

fn sample_step(
    network: &Network,
    sample: &TrainSample,
    cfg: &TrainConfig,
    constraints_active: bool,
    grad_scale: f64,
) -> Result<SampleOutcome> {
    let forward = network.forward_bundle(&sample.bundle)?;
    let pred = forward.predictions();
    let heads = pred.heads();
    let labels = label_as_f64(&sample.labels);
    let label_refs: [Option<&[f64]>; 4] = std::array::from_fn(|h| labels[h].as_deref());

    let dice = masked_dice_supervision(heads, label_refs, cfg.dice_smooth)?;
    let wm: Vec<f64> = sample.bundle.wm_t2.to_f64();
    let spat = spatial_loss(heads, &wm, &cfg.loss_options)?;
    let longitudinal = sample.bundle.is_longitudinal();
    let long = if longitudinal {
        Some(longitudinal_loss(
            &pred.p_new_t2,
            &pred.p_vanish_t2,
            label_refs[0],
            label_refs[1],
            &cfg.loss_options,
        )?)
    } else {
        None
    };
    let vol = if longitudinal {
        Some(volumetric_loss(
            &pred.p_all_t1,
            &pred.p_all_t2,
            sample.bundle.interval_years,
            &cfg.vol_params,
            sample.bundle.x_t1.voxel_volume_mm3(),
            &cfg.loss_options,
        )?)
    } else {
        None
    };

    let components = LossComponents {
        dice: dice.value,
        long: long.as_ref().map_or(0.0, |l| l.value),
        vol: vol.as_ref().map_or(0.0, |v| v.value),
        spat: spat.value,
    };

    let n = heads[0].len();
    let mut head_grads: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for h in 0..4 {
        if let Some(g) = &dice.grads[h] {
            for (dst, &v) in head_grads[h].iter_mut().zip(g) {
                *dst += v;
            }
        }
    }
    if constraints_active {
        let w = &cfg.weights;
        if let Some(l) = &long {
            for (dst, &v) in head_grads[2].iter_mut().zip(&l.grad_new) {
                *dst += w.lambda_long * v;
            }
            for (dst, &v) in head_grads[3].iter_mut().zip(&l.grad_vanish) {
                *dst += w.lambda_long * v;
            }
        }
        if let Some(v) = &vol {
            for (dst, &g) in head_grads[0].iter_mut().zip(&v.grad_t1) {
                *dst += w.lambda_vol * g;
            }
            for (dst, &g) in head_grads[1].iter_mut().zip(&v.grad_t2) {
                *dst += w.lambda_vol * g;
            }
        }
        for h in 0..4 {
            for (dst, &g) in head_grads[h].iter_mut().zip(&spat.grads[h]) {
                *dst += w.lambda_spat * g;
            }
        }
    }

    let mut head_l2 = [0.0; 4];
    for h in 0..4 {
        head_l2[h] = head_grads[h].iter().map(|&g| g * g).sum::<f64>().sqrt();
        for g in head_grads[h].iter_mut() {
            *g *= grad_scale;
        }
    }

    let mut grads = network.zero_grads();
    let head_refs: [Option<&[f64]>; 4] =
        std::array::from_fn(|h| (head_l2[h] > 0.0).then_some(head_grads[h].as_slice()));
    network.backward_two_pass(&forward, head_refs, &mut grads);

    Ok(SampleOutcome {
        components,
        grads,
        head_l2,
    })
}

fn check_finite(name: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical {
            component: name.to_string(),
            reason: format!("loss component became {value}"),
        });
    }
    Ok(())
}

/// Run one batch: forward, losses, backward. Returns diagnostics and the
/// batch-mean parameter gradients. Public so tests can drive single steps.
pub fn train_one_batch(
    network: &Network,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(BatchStats, Vec<Vec<f64>>)> {
    let schedule = cfg.schedule();
    let active = schedule.constraints_active(epoch);
    let scale = 1.0 / samples.len() as f64;

    let outcomes: Vec<Result<SampleOutcome>> = exec::map_indexed(samples.len(), |i| {
        sample_step(network, &samples[i], cfg, active, scale)
    });

    let mut grads = network.zero_grads();
    let mut components = LossComponents::default();
    let mut head_l2 = [0.0; 4];
    for outcome in outcomes {
        let o = outcome?;
        components.dice += o.components.dice * scale;
        components.long += o.components.long * scale;
        components.vol += o.components.vol * scale;
        components.spat += o.components.spat * scale;
        for h in 0..4 {
            head_l2[h] += o.head_l2[h];
        }
        for (layer, g) in grads.iter_mut().zip(o.grads) {
            for (dst, v) in layer.iter_mut().zip(g) {
                *dst += v;
            }
        }
    }

    check_finite("dice", components.dice)?;
    check_finite("long", components.long)?;
    check_finite("vol", components.vol)?;
    check_finite("spat", components.spat)?;
    let total = total_loss(&components, epoch, &schedule, &cfg.weights);
    check_finite("total", total)?;

    Ok((
        BatchStats {
            components,
            total,
            head_grad_l2: head_l2,
        },
        grads,
    ))
}

// ------------------------------------------------------------ training loop

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub dice: f64,
    pub long: f64,
    pub vol: f64,
    pub spat: f64,
    pub total: f64,
    pub lr: f64,
}

/// A trained fold: final network plus the full loss log.
pub struct TrainedFold {
    pub fold: usize,
    pub network: Network,
    pub log: Vec<EpochLog>,
    pub network_seed: u64,
}

fn epoch_rng(seed: u64, fold: usize, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (fold as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
            ^ (epoch as u64).wrapping_mul(0x94d0_49bb_1331_11eb),
    )
}

fn network_seed(cfg: &TrainConfig, fold: usize) -> u64 {
    cfg.seed.wrapping_add((fold as u64).wrapping_mul(7919))
}

/// Train one fold to completion.
pub fn train_fold(
    manifests: &[DatasetManifest],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
) -> Result<TrainedFold> {
    cfg.validate()?;
    let net_seed = network_seed(cfg, fold);
    let mut network = build_network(model_cfg, net_seed)?;
    let mut optimizer = Adam::new(cfg.learning_rate, &network.zero_grads());
    let mut log = Vec::with_capacity(cfg.n_epoch);

    for epoch in 0..cfg.n_epoch {
        let mut rng = epoch_rng(cfg.seed, fold, epoch);
        let samples: Vec<TrainSample> = (0..cfg.batch_size)
            .map(|_| draw_sample(manifests, &plan.train, &mut rng, model_cfg.patch_size, cfg))
            .collect::<Result<Vec<_>>>()?;
        let (stats, grads) = train_one_batch(&network, &samples, cfg, epoch)?;
        optimizer.update(&mut network.params_mut(), &grads);
        log.push(EpochLog {
            epoch,
            dice: stats.components.dice,
            long: stats.components.long,
            vol: stats.components.vol,
            spat: stats.components.spat,
            total: stats.total,
            lr: cfg.learning_rate,
        });
    }

    Ok(TrainedFold {
        fold,
        network,
        log,
        network_seed: net_seed,
    })
}

/// Train every fold, producing the ensemble.
pub fn train_ensemble(
    manifests: &[DatasetManifest],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<TrainedFold>> {
    let plans = make_folds(manifests, cfg.folds, cfg.seed)?;
    plans
        .iter()
        .enumerate()
        .map(|(f, plan)| train_fold(manifests, plan, model_cfg, cfg, f))
        .collect()
}

// ------------------------------------------------------------- persistence

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,dice,long,vol,spat,total,lr\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.epoch, row.dice, row.long, row.vol, row.spat, row.total, row.lr
        ));
    }
    out
}

pub fn parse_loss_log(text: &str) -> Result<Vec<EpochLog>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Validation(format!(
                "loss log line {i}: expected 7 fields, got {}",
                fields.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Validation(format!("loss log line {i}: {e}")))
        };
        rows.push(EpochLog {
            epoch: fields[0]
                .parse()
                .map_err(|e| Error::Validation(format!("loss log line {i}: {e}")))?,
            dice: f(fields[1])?,
            long: f(fields[2])?,
            vol: f(fields[3])?,
            spat: f(fields[4])?,
            total: f(fields[5])?,
            lr: f(fields[6])?,
        });
    }
    Ok(rows)
}

/// On-disk description of a trained ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub model: ModelConfig,
    pub folds: usize,
    pub members: Vec<EnsembleMember>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub path: String,
    pub fold: usize,
    pub network_seed: u64,
}

/// Write member checkpoints, per-fold loss logs, and the ensemble manifest.
pub fn save_ensemble(
    folds: &[TrainedFold],
    model_cfg: &ModelConfig,
    out_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut members = Vec::new();
    for fold in folds {
        let name = format!("fold{}.hsck", fold.fold);
        save_checkpoint(
            &fold.network,
            fold.network_seed,
            fold.log.len(),
            out_dir.join(&name),
        )?;
        let log_path = out_dir.join(format!("fold{}_loss.csv", fold.fold));
        std::fs::write(&log_path, loss_log_csv(&fold.log))
            .map_err(|e| Error::io(&log_path, e))?;
        members.push(EnsembleMember {
            path: name,
            fold: fold.fold,
            network_seed: fold.network_seed,
        });
    }
    let manifest = EnsembleManifest {
        model: *model_cfg,
        folds: folds.len(),
        members,
    };
    let path = out_dir.join("ensemble.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load every member checkpoint referenced by an ensemble manifest.
pub fn load_ensemble(manifest_path: impl AsRef<Path>) -> Result<Vec<Checkpoint>> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: EnsembleManifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .members
        .iter()
        .map(|m| load_checkpoint(base.join(&m.path)))
        .collect()
}

// --------------------------------------------------------------- prediction

/// Ensemble prediction for every sliding window of a record: voxelwise mean
/// of member probabilities, tiled to the full volume size.
pub fn predict(
    networks: &[&Network],
    record: &SubjectRecord,
    availability: crate::labels::LabelAvailability,
    overlap: f64,
) -> Result<Vec<PredictionBundle>> {
    if networks.is_empty() {
        return Err(Error::Config("ensemble has no members".into()));
    }
    let windows = sliding_windows(record);
    let mut out = Vec::with_capacity(windows.len());
    for window in windows {
        let bundle = pack_inputs(record, window, availability)?;
        let members: Vec<Result<PredictionBundle>> = exec::map_indexed(networks.len(), |m| {
            sliding_inference(networks[m], &bundle, overlap)
        });
        let mut mean: Option<PredictionBundle> = None;
        for member in members {
            let p = member?;
            match &mut mean {
                None => mean = Some(p),
                Some(acc) => {
                    for (dst, src) in [
                        (&mut acc.p_all_t1, &p.p_all_t1),
                        (&mut acc.p_all_t2, &p.p_all_t2),
                        (&mut acc.p_new_t2, &p.p_new_t2),
                        (&mut acc.p_vanish_t2, &p.p_vanish_t2),
                    ] {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        let mut mean = mean.expect("at least one member");
        let k = networks.len() as f64;
        for head in [
            &mut mean.p_all_t1,
            &mut mean.p_all_t2,
            &mut mean.p_new_t2,
            &mut mean.p_vanish_t2,
        ] {
            for v in head.iter_mut() {
                *v /= k;
            }
        }
        out.push(mean);
    }
    Ok(out)
}

/// All-lesion probability series across timepoints from per-window
/// predictions: the first window's first-timepoint map, then every
/// window's second-timepoint map.
pub fn all_lesion_series(
    record: &SubjectRecord,
    window_preds: &[PredictionBundle],
) -> Vec<Vec<f64>> {
    if record.timepoints.len() <= 1 {
        return vec![window_preds[0].p_all_t1.clone()];
    }
    let mut series = vec![window_preds[0].p_all_t1.clone()];
    for pred in window_preds {
        series.push(pred.p_all_t2.clone());
    }
    series
}
