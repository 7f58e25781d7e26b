//! Evaluation metrics: voxel Dice, lesion-wise detection F1 over connected
//! components, volume trajectories with Pearson correlation, and paired
//! t-tests.

pub mod report;
pub mod svg;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

// ------------------------------------------------------------------- Dice

/// Voxel-overlap Dice between two binary masks; empty-empty scores 1.
pub fn dice_score(pred: &Volume3D, gt: &Volume3D) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Validation(format!(
            "dice_score: shape mismatch {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Validation(
            "dice_score expects binary masks; binarize predictions first".into(),
        ));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if p != 0.0 {
            a += 1;
        }
        if g != 0.0 {
            b += 1;
        }
        if p != 0.0 && g != 0.0 {
            inter += 1;
        }
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

// --------------------------------------------------- connected components

/// Neighborhood used for component extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_manhattan = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m > 0 && m <= max_manhattan {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Label the connected components of a binary mask.
/// Returns per-voxel component ids (0 = background, 1..=count) and the
/// component count.
pub fn connected_components(mask: &Volume3D, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let [n0, n1, n2] = mask.shape();
    let idx = |x: usize, y: usize, z: usize| (x * n1 + y) * n2 + z;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; mask.num_voxels()];
    let mut next = 0u32;
    let mut stack: Vec<[usize; 3]> = Vec::new();
    for x in 0..n0 {
        for y in 0..n1 {
            for z in 0..n2 {
                if mask.data[[x, y, z]] == 0.0 || labels[idx(x, y, z)] != 0 {
                    continue;
                }
                next += 1;
                labels[idx(x, y, z)] = next;
                stack.push([x, y, z]);
                while let Some([cx, cy, cz]) = stack.pop() {
                    for off in &offsets {
                        let nx = cx as isize + off[0];
                        let ny = cy as isize + off[1];
                        let nz = cz as isize + off[2];
                        if nx < 0
                            || ny < 0
                            || nz < 0
                            || nx >= n0 as isize
                            || ny >= n1 as isize
                            || nz >= n2 as isize
                        {
                            continue;
                        }
                        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                        if mask.data[[nx, ny, nz]] != 0.0 && labels[idx(nx, ny, nz)] == 0 {
                            labels[idx(nx, ny, nz)] = next;
                            stack.push([nx, ny, nz]);
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

// -------------------------------------------------------------- lesion F1

/// Component-level detection bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionMatchResult {
    /// Ground-truth components detected by at least one prediction
    /// component with sufficient overlap.
    pub tp: usize,
    /// Prediction components overlapping no ground-truth component.
    pub fp: usize,
    /// Ground-truth components left undetected.
    pub missed: usize,
    /// `(pred component id, gt component id, overlap voxels)` for every
    /// pair meeting the overlap threshold.
    pub matched: Vec<(u32, u32, usize)>,
    pub f1: f64,
}

impl LesionMatchResult {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.missed == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.missed) as f64
        }
    }
}

/// Lesion-wise detection F1: a ground-truth component counts as detected
/// when some prediction component overlaps it by at least
/// `min_overlap_voxels`; prediction components touching no ground truth
/// are false positives. Empty-empty scores 1.
pub fn lesion_f1(
    pred: &Volume3D,
    gt: &Volume3D,
    connectivity: Connectivity,
    min_overlap_voxels: usize,
) -> Result<LesionMatchResult> {
    if pred.shape() != gt.shape() {
        return Err(Error::Validation(format!(
            "lesion_f1: shape mismatch {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let min_overlap = min_overlap_voxels.max(1);
    let (pred_labels, n_pred) = connected_components(pred, connectivity);
    let (gt_labels, n_gt) = connected_components(gt, connectivity);

    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&pl, &gl) in pred_labels.iter().zip(&gt_labels) {
        if pl != 0 && gl != 0 {
            *overlap.entry((pl, gl)).or_insert(0) += 1;
        }
    }

    let mut matched: Vec<(u32, u32, usize)> = overlap
        .iter()
        .filter(|(_, &count)| count >= min_overlap)
        .map(|(&(p, g), &count)| (p, g, count))
        .collect();
    matched.sort_unstable();

    let mut gt_detected = vec![false; n_gt + 1];
    let mut pred_matched = vec![false; n_pred + 1];
    for &(p, g, _) in &matched {
        gt_detected[g as usize] = true;
        pred_matched[p as usize] = true;
    }
    let tp = gt_detected.iter().filter(|&&d| d).count();
    let fp = n_pred - pred_matched.iter().filter(|&&m| m).count();
    let missed = n_gt - tp;

    let f1 = if n_gt == 0 && n_pred == 0 {
        1.0
    } else if 2 * tp + fp + missed == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + missed) as f64
    };

    Ok(LesionMatchResult {
        tp,
        fp,
        missed,
        matched,
        f1,
    })
}

// ----------------------------------------------------------- trajectories

/// Lesion volumes over time for prediction and ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub pred_volumes_mm3: Vec<f64>,
    pub gt_volumes_mm3: Vec<f64>,
    /// Pearson correlation; `None` when either sequence is constant.
    pub rho: Option<f64>,
}

/// Soft volume in mm^3: probability (or mask) sum times voxel volume.
pub fn soft_volume_mm3(values: &[f64], voxel_volume_mm3: f64) -> f64 {
    values.iter().sum::<f64>() * voxel_volume_mm3
}

/// Pearson correlation coefficient; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    if var_a == 0.0 || var_b == 0.0 {
        None
    } else {
        Some(cov / (var_a * var_b).sqrt())
    }
}

/// Volume trajectory over equal-length series of probability maps (or
/// masks) and ground-truth masks.
pub fn volume_trajectory(
    pred_series: &[Vec<f64>],
    gt_series: &[Vec<f64>],
    voxel_volume_mm3: f64,
) -> Result<TrajectoryReport> {
    if pred_series.len() != gt_series.len() {
        return Err(Error::Validation(format!(
            "volume_trajectory: series lengths differ ({} vs {})",
            pred_series.len(),
            gt_series.len()
        )));
    }
    if pred_series.len() < 2 {
        return Err(Error::Validation(
            "volume_trajectory needs at least two timepoints".into(),
        ));
    }
    let pred_volumes: Vec<f64> = pred_series
        .iter()
        .map(|v| soft_volume_mm3(v, voxel_volume_mm3))
        .collect();
    let gt_volumes: Vec<f64> = gt_series
        .iter()
        .map(|v| soft_volume_mm3(v, voxel_volume_mm3))
        .collect();
    let rho = pearson(&pred_volumes, &gt_volumes);
    Ok(TrajectoryReport {
        pred_volumes_mm3: pred_volumes,
        gt_volumes_mm3: gt_volumes,
        rho,
    })
}

// ------------------------------------------------------------------ t-test

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub p_value: f64,
    pub df: f64,
    /// Zero variance of the paired differences: t and p are not meaningful.
    pub degenerate: bool,
}

/// Two-sided paired Student's t-test on per-case differences.
pub fn paired_t_test(scores_a: &[f64], scores_b: &[f64]) -> Result<TTestResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Validation(format!(
            "paired_t_test: lengths differ ({} vs {})",
            scores_a.len(),
            scores_b.len()
        )));
    }
    let n = scores_a.len();
    if n < 2 {
        return Err(Error::Validation(
            "paired_t_test needs at least two pairs".into(),
        ));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    let df = n as f64 - 1.0;
    if var == 0.0 {
        let t = if mean == 0.0 {
            0.0
        } else {
            mean.signum() * f64::INFINITY
        };
        return Ok(TTestResult {
            t,
            p_value: f64::NAN,
            df,
            degenerate: true,
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Validation(format!("t-distribution: {e}")))?;
    let p_value = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTestResult {
        t,
        p_value,
        df,
        degenerate: false,
    })
}
