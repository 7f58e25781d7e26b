//! Composite training loss: soft Dice plus longitudinal, volumetric, and
//! spatial constraint terms, combined under a curriculum schedule.
//!
//! Every loss returns its value together with analytic gradients w.r.t. the
//! prediction inputs; [`gradcheck`] verifies those gradients against central
//! finite differences. Inputs are flat row-major slices; masks are 0/1.
//!
//! Squared-norm terms are voxel-count normalized by default so that weight
//! settings transfer across volume sizes; the unnormalized literal form is
//! available through [`LossOptions`].

pub mod gradcheck;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighting of the three constraint losses in the combined objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_long: f64,
    pub lambda_vol: f64,
    pub lambda_spat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_long: 5.0,
            lambda_vol: 1.0,
            lambda_spat: 1.0,
        }
    }
}

/// Allowed relative lesion-volume change band between two timepoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumetricParams {
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Scale the band linearly with the inter-scan interval in years.
    pub annualized: bool,
}

impl Default for VolumetricParams {
    fn default() -> Self {
        VolumetricParams {
            alpha_low: 0.8,
            alpha_high: 1.2,
            annualized: true,
        }
    }
}

impl VolumetricParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha_low && self.alpha_low < 1.0 && self.alpha_high > 1.0) {
            return Err(Error::Config(format!(
                "volume band requires 0 < alpha_low < 1 < alpha_high, got [{}, {}]",
                self.alpha_low, self.alpha_high
            )));
        }
        Ok(())
    }

    /// Band edges for a given inter-scan interval.
    pub fn effective_band(&self, interval_years: f64) -> (f64, f64) {
        if !self.annualized {
            return (self.alpha_low, self.alpha_high);
        }
        let low = (1.0 - (1.0 - self.alpha_low) * interval_years).max(0.0);
        let high = 1.0 + (self.alpha_high - 1.0) * interval_years;
        (low, high)
    }
}

/// When during training the constraint losses switch on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumSchedule {
    pub n_epoch: usize,
    pub activation_fraction: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            n_epoch: 200,
            activation_fraction: 0.5,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_epoch == 0 {
            return Err(Error::Config("n_epoch must be positive".into()));
        }
        if !(self.activation_fraction > 0.0 && self.activation_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "activation_fraction must be in (0, 1], got {}",
                self.activation_fraction
            )));
        }
        Ok(())
    }

    /// True once the constraint losses participate in the total.
    pub fn constraints_active(&self, epoch: usize) -> bool {
        (epoch as f64) >= self.activation_fraction * self.n_epoch as f64
    }
}

/// Algebraic form of the constraint squared-error terms. Both forms have
/// identical gradients for binary labels; the gated form subtracts the
/// prediction-independent constant so reported values are interpretable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintForm {
    #[default]
    Gated,
    Literal,
}

/// Form and normalization switches shared by the constraint losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub form: ConstraintForm,
    /// Divide squared-norm terms by voxel count (and use mean probability as
    /// the soft-volume functional).
    pub normalize: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            form: ConstraintForm::Gated,
            normalize: true,
        }
    }
}

/// A loss value with the gradient w.r.t. one prediction input.
#[derive(Debug, Clone)]
pub struct ScalarWithGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(name: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Validation(format!(
            "{name}: operand lengths differ ({a} vs {b})"
        )));
    }
    Ok(())
}

// ------------------------------------------------------------------ soft Dice

/// Soft Dice loss `1 - (2 Σ p t + s) / (Σ p + Σ t + s)`.
///
/// With `smooth > 0` the empty-empty case evaluates to 0.
pub fn dice_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<ScalarWithGrad> {
    check_len("dice_loss", pred.len(), target.len())?;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        psum += p;
        tsum += t;
    }
    let num = 2.0 * inter + smooth;
    let den = psum + tsum + smooth;
    let value = 1.0 - num / den;
    let den2 = den * den;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t * den - num) / den2)
        .collect();
    Ok(ScalarWithGrad { value, grad })
}

// ------------------------------------------------------- longitudinal (MSE)

/// Longitudinal constraint loss and its gradients.
#[derive(Debug, Clone)]
pub struct LongitudinalLoss {
    pub value: f64,
    pub grad_new: Vec<f64>,
    pub grad_vanish: Vec<f64>,
}

/// Squared-error constraints tying the new/vanishing heads to the all-lesion
/// labels of the two timepoints.
///
/// Four terms, each applied only when its referenced label is present:
/// new-lesion predictions are pushed to 0 on the first-timepoint all-lesion
/// mask and to 1 on the second-timepoint mask; vanishing-lesion predictions
/// the other way around. With no referenced label present the loss is 0
/// (cross-sectional exemption is handled by the caller, which simply does
/// not pass labels for degenerate pairs).
pub fn longitudinal_loss(
    p_new: &[f64],
    p_vanish: &[f64],
    y_all_t1: Option<&[f64]>,
    y_all_t2: Option<&[f64]>,
    opts: &LossOptions,
) -> Result<LongitudinalLoss> {
    check_len("longitudinal_loss", p_new.len(), p_vanish.len())?;
    if let Some(y) = y_all_t1 {
        check_len("longitudinal_loss (y_all_t1)", y.len(), p_new.len())?;
    }
    if let Some(y) = y_all_t2 {
        check_len("longitudinal_loss (y_all_t2)", y.len(), p_new.len())?;
    }
    let n = p_new.len() as f64;
    let scale = if opts.normalize { 1.0 / n } else { 1.0 };

    let mut value = 0.0;
    let mut grad_new = vec![0.0; p_new.len()];
    let mut grad_vanish = vec![0.0; p_vanish.len()];

    // toward: squared error pulling p toward 0 or 1 on the masked voxels.
    let mut term = |y: &[f64], p: &[f64], toward_one: bool, grad: &mut [f64]| {
        let mut sum = 0.0;
        for i in 0..p.len() {
            let (v, g) = match opts.form {
                ConstraintForm::Gated => {
                    let r = if toward_one {
                        y[i] * (p[i] - 1.0)
                    } else {
                        y[i] * p[i]
                    };
                    (r * r, 2.0 * r * y[i])
                }
                ConstraintForm::Literal => {
                    let r = if toward_one {
                        y[i] * p[i] - 1.0
                    } else {
                        y[i] * p[i]
                    };
                    (r * r, 2.0 * r * y[i])
                }
            };
            sum += v;
            grad[i] += g * scale;
        }
        value += sum * scale;
    };

    if let Some(y1) = y_all_t1 {
        term(y1, p_new, false, &mut grad_new);
        term(y1, p_vanish, true, &mut grad_vanish);
    }
    if let Some(y2) = y_all_t2 {
        term(y2, p_new, true, &mut grad_new);
        term(y2, p_vanish, false, &mut grad_vanish);
    }

    Ok(LongitudinalLoss {
        value,
        grad_new,
        grad_vanish,
    })
}

// ------------------------------------------------------------- volumetric

/// Volumetric constraint loss and its gradients.
#[derive(Debug, Clone)]
pub struct VolumetricLoss {
    pub value: f64,
    pub grad_t1: Vec<f64>,
    pub grad_t2: Vec<f64>,
    /// Soft lesion volumes actually compared (after normalization choice).
    pub volume_t1: f64,
    pub volume_t2: f64,
}

/// Penalize second-timepoint soft lesion volume outside the allowed band
/// around the first-timepoint volume.
///
/// Soft volume is `Σ p · voxel_volume` (mm³) in the unnormalized form, or
/// mean probability in the normalized form; the band comparison is
/// invariant to that common scale. An interval of 0 years (cross-sectional
/// or degenerate pair) disables the penalty.
pub fn volumetric_loss(
    p_all_t1: &[f64],
    p_all_t2: &[f64],
    interval_years: f64,
    params: &VolumetricParams,
    voxel_volume_mm3: f64,
    opts: &LossOptions,
) -> Result<VolumetricLoss> {
    check_len("volumetric_loss", p_all_t1.len(), p_all_t2.len())?;
    if interval_years < 0.0 {
        return Err(Error::Validation(format!(
            "interval_years must be non-negative, got {interval_years}"
        )));
    }
    let n = p_all_t1.len();
    let unit = if opts.normalize {
        1.0 / n as f64
    } else {
        voxel_volume_mm3
    };
    let v1: f64 = p_all_t1.iter().sum::<f64>() * unit;
    let v2: f64 = p_all_t2.iter().sum::<f64>() * unit;

    if interval_years == 0.0 {
        return Ok(VolumetricLoss {
            value: 0.0,
            grad_t1: vec![0.0; n],
            grad_t2: vec![0.0; n],
            volume_t1: v1,
            volume_t2: v2,
        });
    }

    let (low, high) = params.effective_band(interval_years);
    let (value, alpha) = if v2 >= high * v1 {
        let d = v2 - high * v1;
        (d * d, Some(high))
    } else if v2 <= low * v1 {
        let d = v2 - low * v1;
        (d * d, Some(low))
    } else {
        (0.0, None)
    };

    let (grad_t1, grad_t2) = match alpha {
        Some(a) => {
            let d = v2 - a * v1;
            (
                vec![-2.0 * d * a * unit; n],
                vec![2.0 * d * unit; n],
            )
        }
        None => (vec![0.0; n], vec![0.0; n]),
    };

    Ok(VolumetricLoss {
        value,
        grad_t1,
        grad_t2,
        volume_t1: v1,
        volume_t2: v2,
    })
}

// ---------------------------------------------------------------- spatial

/// Spatial constraint loss and per-head gradients.
#[derive(Debug, Clone)]
pub struct SpatialLoss {
    pub value: f64,
    pub grads: [Vec<f64>; 4],
}

/// Squared error of predictions outside the white matter mask, summed over
/// all four prediction heads.
pub fn spatial_loss(
    preds: [&[f64]; 4],
    wm_mask: &[f64],
    opts: &LossOptions,
) -> Result<SpatialLoss> {
    for p in &preds {
        check_len("spatial_loss", p.len(), wm_mask.len())?;
    }
    let scale = if opts.normalize {
        1.0 / wm_mask.len() as f64
    } else {
        1.0
    };
    let mut value = 0.0;
    let mut grads: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; wm_mask.len()]);
    for (h, p) in preds.iter().enumerate() {
        for i in 0..p.len() {
            let outside = 1.0 - wm_mask[i];
            let r = p[i] * outside;
            value += r * r * scale;
            grads[h][i] = 2.0 * r * outside * scale;
        }
    }
    Ok(SpatialLoss { value, grads })
}

// ------------------------------------------------------------- curriculum

/// Unweighted loss components for one step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub dice: f64,
    pub long: f64,
    pub vol: f64,
    pub spat: f64,
}

/// Combine components under the curriculum: Dice alone before the
/// activation epoch, the weighted sum from then on.
pub fn total_loss(
    components: &LossComponents,
    epoch: usize,
    schedule: &CurriculumSchedule,
    weights: &LossWeights,
) -> f64 {
    if schedule.constraints_active(epoch) {
        components.dice
            + weights.lambda_long * components.long
            + weights.lambda_vol * components.vol
            + weights.lambda_spat * components.spat
    } else {
        components.dice
    }
}

// --------------------------------------------------- masked Dice supervision

/// Dice supervision gated by label availability.
#[derive(Debug, Clone)]
pub struct MaskedDice {
    pub value: f64,
    /// Per-head gradients in head order (all t1, all t2, new, vanish);
    /// `None` where the matching label is absent.
    pub grads: [Option<Vec<f64>>; 4],
    pub terms: usize,
}

/// Sum Dice losses over the prediction heads whose matching label exists.
/// Heads without a label receive no loss and no gradient.
pub fn masked_dice_supervision(
    preds: [&[f64]; 4],
    labels: [Option<&[f64]>; 4],
    smooth: f64,
) -> Result<MaskedDice> {
    let mut value = 0.0;
    let mut terms = 0;
    let mut grads: [Option<Vec<f64>>; 4] = [None, None, None, None];
    for h in 0..4 {
        if let Some(label) = labels[h] {
            let d = dice_loss(preds[h], label, smooth)?;
            value += d.value;
            grads[h] = Some(d.grad);
            terms += 1;
        }
    }
    Ok(MaskedDice {
        value,
        grads,
        terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-9;

    #[test]
    fn dice_zero_when_prediction_matches_binary_target() {
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let d = dice_loss(&t, &t, 1.0).unwrap();
        assert!(d.value.abs() < TOL);
    }

    #[test]
    fn dice_empty_empty_is_zero_with_smooth() {
        let z = vec![0.0; 8];
        let d = dice_loss(&z, &z, 1.0).unwrap();
        assert!(d.value.abs() < TOL);
    }

    #[test]
    fn dice_half_prediction_hand_value() {
        // pred ≡ 0.5 on 2x2x2, target ≡ 1, smooth 0:
        // 1 - (2·4)/(4 + 8) = 1/3
        let pred = vec![0.5; 8];
        let target = vec![1.0; 8];
        let d = dice_loss(&pred, &target, 0.0).unwrap();
        assert!((d.value - 1.0 / 3.0).abs() < TOL);
    }

    #[test]
    fn dice_shape_mismatch() {
        assert!(dice_loss(&[0.5, 0.5], &[1.0], 1.0).is_err());
    }

    #[test]
    fn longitudinal_absent_labels_gives_zero() {
        let p = vec![0.7, 0.2];
        let l = longitudinal_loss(&p, &p, None, None, &LossOptions::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_new.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn longitudinal_satisfied_configuration_is_zero() {
        // y1 = (1,0), y2 = (0,1), p_n = (0,1), p_v = (1,0): all terms vanish.
        let y1 = [1.0, 0.0];
        let y2 = [0.0, 1.0];
        let p_n = [0.0, 1.0];
        let p_v = [1.0, 0.0];
        let l = longitudinal_loss(&p_n, &p_v, Some(&y1), Some(&y2), &LossOptions::default())
            .unwrap();
        assert!(l.value.abs() < TOL);
    }

    #[test]
    fn longitudinal_hand_value() {
        // Same labels, p_n = (1,0): T1 = 1/2, T2 = 1/2, total 1.0.
        let y1 = [1.0, 0.0];
        let y2 = [0.0, 1.0];
        let p_n = [1.0, 0.0];
        let p_v = [1.0, 0.0];
        let l = longitudinal_loss(&p_n, &p_v, Some(&y1), Some(&y2), &LossOptions::default())
            .unwrap();
        assert!((l.value - 1.0).abs() < TOL, "value = {}", l.value);
    }

    #[test]
    fn longitudinal_grad_zero_outside_both_labels() {
        let y1 = [1.0, 0.0, 0.0];
        let y2 = [0.0, 1.0, 0.0];
        let p_n = [0.3, 0.6, 0.9];
        let p_v = [0.2, 0.5, 0.8];
        for form in [ConstraintForm::Gated, ConstraintForm::Literal] {
            let opts = LossOptions {
                form,
                normalize: true,
            };
            let l = longitudinal_loss(&p_n, &p_v, Some(&y1), Some(&y2), &opts).unwrap();
            assert_eq!(l.grad_new[2], 0.0);
            assert_eq!(l.grad_vanish[2], 0.0);
        }
    }

    #[test]
    fn gated_and_literal_forms_have_equal_gradients() {
        let y1 = [1.0, 0.0, 1.0, 0.0];
        let y2 = [0.0, 1.0, 1.0, 0.0];
        let p_n = [0.3, 0.6, 0.9, 0.5];
        let p_v = [0.2, 0.5, 0.8, 0.1];
        let gated = longitudinal_loss(
            &p_n,
            &p_v,
            Some(&y1),
            Some(&y2),
            &LossOptions {
                form: ConstraintForm::Gated,
                normalize: true,
            },
        )
        .unwrap();
        let literal = longitudinal_loss(
            &p_n,
            &p_v,
            Some(&y1),
            Some(&y2),
            &LossOptions {
                form: ConstraintForm::Literal,
                normalize: true,
            },
        )
        .unwrap();
        for i in 0..4 {
            assert!((gated.grad_new[i] - literal.grad_new[i]).abs() < TOL);
            assert!((gated.grad_vanish[i] - literal.grad_vanish[i]).abs() < TOL);
        }
        // Values differ by the prediction-independent constant #(y=0)/N per
        // toward-one term: here 2/4 (from y2 on p_n) + 2/4 (from y1 on p_v).
        assert!(((literal.value - gated.value) - 1.0).abs() < TOL);
    }

    fn uniform(n: usize, v: f64) -> Vec<f64> {
        vec![v; n]
    }

    #[test]
    fn volumetric_branches_match_hand_values() {
        // Unnormalized, voxel volume 1 mm³, interval 1 year, band [0.8, 1.2].
        // V1 = 100 from 800 voxels of 0.125; upper: V2 = 130 -> (130-120)^2.
        let opts = LossOptions {
            form: ConstraintForm::Gated,
            normalize: false,
        };
        let params = VolumetricParams::default();
        let p1 = uniform(800, 0.125);
        let inside = volumetric_loss(&p1, &uniform(800, 0.1375), 1.0, &params, 1.0, &opts)
            .unwrap(); // V2 = 110
        assert_eq!(inside.value, 0.0);
        let upper = volumetric_loss(&p1, &uniform(800, 0.1625), 1.0, &params, 1.0, &opts)
            .unwrap(); // V2 = 130
        assert!((upper.value - 100.0).abs() < 1e-9, "upper = {}", upper.value);
        let lower = volumetric_loss(&p1, &uniform(800, 0.0875), 1.0, &params, 1.0, &opts)
            .unwrap(); // V2 = 70
        assert!((lower.value - 100.0).abs() < 1e-9, "lower = {}", lower.value);
    }

    #[test]
    fn volumetric_zero_interval_disables_penalty() {
        let opts = LossOptions::default();
        let l = volumetric_loss(
            &uniform(10, 0.9),
            &uniform(10, 0.1),
            0.0,
            &VolumetricParams::default(),
            1.0,
            &opts,
        )
        .unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn volumetric_continuous_at_band_edges() {
        let params = VolumetricParams::default();
        let opts = LossOptions {
            form: ConstraintForm::Gated,
            normalize: false,
        };
        let p1 = uniform(100, 0.5); // V1 = 50
        for edge in [0.8 * 50.0, 1.2 * 50.0] {
            for eps in [-1e-7, 0.0, 1e-7] {
                let v2 = edge + eps;
                let p2 = uniform(100, v2 / 100.0);
                let l = volumetric_loss(&p1, &p2, 1.0, &params, 1.0, &opts).unwrap();
                assert!(l.value < 1e-10, "edge {edge} eps {eps}: {}", l.value);
            }
        }
    }

    #[test]
    fn volumetric_depends_only_on_total_mass() {
        let params = VolumetricParams::default();
        let opts = LossOptions::default();
        let p1 = uniform(64, 0.5);
        let mut p2a = uniform(64, 0.0);
        p2a[0] = 1.0; // mass 1
        let mut p2b = uniform(64, 1.0 / 64.0); // same mass, spread out
        p2b[63] = 1.0 / 64.0;
        let la = volumetric_loss(&p1, &p2a, 1.0, &params, 1.0, &opts).unwrap();
        let lb = volumetric_loss(&p1, &p2b, 1.0, &params, 1.0, &opts).unwrap();
        assert!((la.value - lb.value).abs() < 1e-12);
    }

    #[test]
    fn spatial_hand_value() {
        // One head with p = 1 at 3 voxels outside WM on an 8-voxel image,
        // other heads zero: 3/8.
        let wm = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let mut p = vec![0.0; 8];
        p[5] = 1.0;
        p[6] = 1.0;
        p[7] = 1.0;
        let zero = vec![0.0; 8];
        let l = spatial_loss(
            [&p, &zero, &zero, &zero],
            &wm,
            &LossOptions::default(),
        )
        .unwrap();
        assert!((l.value - 3.0 / 8.0).abs() < TOL);
    }

    #[test]
    fn spatial_zero_inside_wm_or_full_wm() {
        let wm_full = vec![1.0; 8];
        let p = vec![0.9; 8];
        let l = spatial_loss(
            [&p, &p, &p, &p],
            &wm_full,
            &LossOptions::default(),
        )
        .unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn curriculum_gates_constraints() {
        let schedule = CurriculumSchedule {
            n_epoch: 100,
            activation_fraction: 0.5,
        };
        let weights = LossWeights::default();
        let c = LossComponents {
            dice: 0.4,
            long: 0.1,
            vol: 0.2,
            spat: 0.3,
        };
        assert_eq!(total_loss(&c, 0, &schedule, &weights), 0.4);
        assert_eq!(total_loss(&c, 49, &schedule, &weights), 0.4);
        let at_50 = total_loss(&c, 50, &schedule, &weights);
        assert!((at_50 - 1.4).abs() < TOL, "epoch 50 total = {at_50}");
    }

    #[test]
    fn curriculum_odd_epoch_boundary_uses_strict_inequality() {
        // n_epoch = 101: threshold 50.5, so epoch 50 is still phase one.
        let schedule = CurriculumSchedule {
            n_epoch: 101,
            activation_fraction: 0.5,
        };
        assert!(!schedule.constraints_active(50));
        assert!(schedule.constraints_active(51));
    }

    #[test]
    fn total_with_zero_weights_is_dice_at_every_epoch() {
        let schedule = CurriculumSchedule {
            n_epoch: 10,
            activation_fraction: 0.5,
        };
        let weights = LossWeights {
            lambda_long: 0.0,
            lambda_vol: 0.0,
            lambda_spat: 0.0,
        };
        let c = LossComponents {
            dice: 0.7,
            long: 9.0,
            vol: 9.0,
            spat: 9.0,
        };
        for epoch in 0..10 {
            assert_eq!(total_loss(&c, epoch, &schedule, &weights), 0.7);
        }
    }

    #[test]
    fn masked_dice_skips_absent_labels() {
        let p = vec![0.5; 4];
        let label = vec![1.0, 0.0, 1.0, 0.0];
        let out = masked_dice_supervision(
            [&p, &p, &p, &p],
            [None, None, Some(&label), None],
            1.0,
        )
        .unwrap();
        assert_eq!(out.terms, 1);
        assert!(out.grads[0].is_none());
        assert!(out.grads[2].is_some());
    }
}
