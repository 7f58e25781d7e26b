//! Finite-difference verification of the analytic loss gradients.
//!
//! Central differences with a configurable step are compared against the
//! gradients returned by each loss. The harness is also wired into the CLI
//! so a build can be checked in the field.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    dice_loss, longitudinal_loss, spatial_loss, volumetric_loss, LossOptions, VolumetricParams,
};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative-error floor: differences below this absolute scale are treated
/// as zero-vs-zero agreement rather than amplified into large ratios.
const REL_FLOOR: f64 = 1e-6;

/// Outcome of checking one loss over a batch of random instances.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} instances, max rel err {:.3e} (tol {:.1e}) at instance {} voxel {} (analytic {:.6e}, numeric {:.6e})",
            self.loss,
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.max_rel_err,
            self.tolerance,
            self.worst_instance,
            self.worst_index,
            self.worst_analytic,
            self.worst_numeric,
        )
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between two gradients.
/// Returns (max rel err, index, analytic, numeric).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize, f64, f64) {
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..analytic.len() {
        let denom = analytic[i].abs().max(numeric[i].abs()).max(REL_FLOOR);
        let err = (analytic[i] - numeric[i]).abs() / denom;
        if err > worst.0 {
            worst = (err, i, analytic[i], numeric[i]);
        }
    }
    worst
}

struct Accumulator {
    report: GradCheckReport,
}

impl Accumulator {
    fn new(loss: &str, tolerance: f64) -> Self {
        Accumulator {
            report: GradCheckReport {
                loss: loss.to_string(),
                instances: 0,
                max_rel_err: 0.0,
                worst_instance: 0,
                worst_index: 0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
                tolerance,
            },
        }
    }

    fn record(&mut self, instance: usize, analytic: &[f64], numeric: &[f64]) {
        let (err, idx, a, n) = max_rel_error(analytic, numeric);
        self.report.instances += 1;
        if err > self.report.max_rel_err {
            self.report.max_rel_err = err;
            self.report.worst_instance = instance;
            self.report.worst_index = idx;
            self.report.worst_analytic = a;
            self.report.worst_numeric = n;
        }
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
        .collect()
}

/// Settings for one gradient-check run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub edge: usize,
    pub step: f64,
    pub tolerance: f64,
    pub base_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: 20,
            edge: 6,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            base_seed: 0x5eed,
        }
    }
}

impl GradCheckConfig {
    fn n(&self) -> usize {
        self.edge * self.edge * self.edge
    }

    fn rng(&self, instance: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.base_seed ^ ((instance as u64) << 16))
    }
}

pub fn check_dice(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut acc = Accumulator::new("dice", cfg.tolerance);
    let n = cfg.n();
    for s in 0..cfg.seeds {
        let mut rng = cfg.rng(s);
        let pred = random_probs(&mut rng, n);
        let target = random_mask(&mut rng, n, 0.3);
        let analytic = dice_loss(&pred, &target, 1.0)?.grad;
        let numeric = fd_gradient(
            |p| dice_loss(p, &target, 1.0).unwrap().value,
            &pred,
            cfg.step,
        );
        acc.record(s, &analytic, &numeric);
    }
    Ok(acc.report)
}

pub fn check_longitudinal(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut acc = Accumulator::new("longitudinal", cfg.tolerance);
    let opts = LossOptions::default();
    let n = cfg.n();
    for s in 0..cfg.seeds {
        let mut rng = cfg.rng(s);
        let p_new = random_probs(&mut rng, n);
        let p_vanish = random_probs(&mut rng, n);
        let y1 = random_mask(&mut rng, n, 0.3);
        let y2 = random_mask(&mut rng, n, 0.3);
        let out = longitudinal_loss(&p_new, &p_vanish, Some(&y1), Some(&y2), &opts)?;
        let numeric_new = fd_gradient(
            |p| {
                longitudinal_loss(p, &p_vanish, Some(&y1), Some(&y2), &opts)
                    .unwrap()
                    .value
            },
            &p_new,
            cfg.step,
        );
        let numeric_vanish = fd_gradient(
            |p| {
                longitudinal_loss(&p_new, p, Some(&y1), Some(&y2), &opts)
                    .unwrap()
                    .value
            },
            &p_vanish,
            cfg.step,
        );
        acc.record(s, &out.grad_new, &numeric_new);
        acc.record(s, &out.grad_vanish, &numeric_vanish);
    }
    Ok(acc.report)
}

pub fn check_volumetric(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut acc = Accumulator::new("volumetric", cfg.tolerance);
    let params = VolumetricParams::default();
    let opts = LossOptions::default();
    let n = cfg.n();
    for s in 0..cfg.seeds {
        let mut rng = cfg.rng(s);
        let p1 = random_probs(&mut rng, n);
        // Place the second volume firmly in the upper branch, lower branch,
        // or the interior so no instance sits on a kink of the piecewise loss.
        let factor = match s % 3 {
            0 => 1.6,
            1 => 0.4,
            _ => 1.0,
        };
        let p2: Vec<f64> = p1.iter().map(|&p| (p * factor).min(0.99)).collect();
        let out = volumetric_loss(&p1, &p2, 1.0, &params, 1.0, &opts)?;
        let numeric_t1 = fd_gradient(
            |p| {
                volumetric_loss(p, &p2, 1.0, &params, 1.0, &opts)
                    .unwrap()
                    .value
            },
            &p1,
            cfg.step,
        );
        let numeric_t2 = fd_gradient(
            |p| {
                volumetric_loss(&p1, p, 1.0, &params, 1.0, &opts)
                    .unwrap()
                    .value
            },
            &p2,
            cfg.step,
        );
        acc.record(s, &out.grad_t1, &numeric_t1);
        acc.record(s, &out.grad_t2, &numeric_t2);
    }
    Ok(acc.report)
}

pub fn check_spatial(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut acc = Accumulator::new("spatial", cfg.tolerance);
    let opts = LossOptions::default();
    let n = cfg.n();
    for s in 0..cfg.seeds {
        let mut rng = cfg.rng(s);
        let wm = random_mask(&mut rng, n, 0.6);
        let preds: Vec<Vec<f64>> = (0..4).map(|_| random_probs(&mut rng, n)).collect();
        let out = spatial_loss(
            [&preds[0], &preds[1], &preds[2], &preds[3]],
            &wm,
            &opts,
        )?;
        for h in 0..4 {
            let numeric = fd_gradient(
                |p| {
                    let mut heads: [&[f64]; 4] =
                        [&preds[0], &preds[1], &preds[2], &preds[3]];
                    heads[h] = p;
                    spatial_loss(heads, &wm, &opts).unwrap().value
                },
                &preds[h],
                cfg.step,
            );
            acc.record(s, &out.grads[h], &numeric);
        }
    }
    Ok(acc.report)
}

/// Run the finite-difference suite for the named losses (all four when
/// `which` is empty).
pub fn run(cfg: &GradCheckConfig, which: &[String]) -> Result<Vec<GradCheckReport>> {
    let all = ["dice", "long", "vol", "spat"];
    let selected: Vec<&str> = if which.is_empty() {
        all.to_vec()
    } else {
        all.iter()
            .copied()
            .filter(|name| which.iter().any(|w| w == name))
            .collect()
    };
    let mut reports = Vec::new();
    for name in selected {
        let report = match name {
            "dice" => check_dice(cfg)?,
            "long" => check_longitudinal(cfg)?,
            "vol" => check_volumetric(cfg)?,
            "spat" => check_spatial(cfg)?,
            _ => unreachable!(),
        };
        reports.push(report);
    }
    Ok(reports)
}
