//! Deterministic synthetic longitudinal brain phantoms.
//!
//! Each subject is a smooth brain ellipsoid with a white-matter interior,
//! hyperintense lesion blobs fully inside the white matter, and follow-up
//! timepoints derived by removing vanishing lesions, adding new ones, and
//! rescaling the survivors so total lesion volume stays within a configured
//! band. Ground-truth label maps for all four annotation styles are exact
//! by construction: lesions are placed with enough clearance that they can
//! never overlap each other or leave the white matter, even at their
//! maximum allowed growth.
//!
//! Generation is pure given `(config, seed)`; subjects may be generated in
//! parallel without affecting the output.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::io::write_volume;
use crate::labels::{LabelAvailability, LabelSet};
use crate::manifest::{
    save_manifest_doc, DatasetFormat, DatasetManifest, LabelEntryDoc, ManifestDoc, RecordDoc,
    Split, SubjectRecord, Timepoint, TimepointDoc,
};
use crate::volume::{Dtype, Volume3D};

/// Intensity means for the piecewise-constant anatomy render.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityLevels {
    pub background: f64,
    pub gray_matter: f64,
    pub white_matter: f64,
    pub lesion: f64,
}

impl Default for IntensityLevels {
    fn default() -> Self {
        IntensityLevels {
            background: 0.05,
            gray_matter: 0.40,
            white_matter: 0.60,
            lesion: 0.95,
        }
    }
}

/// Phantom generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub n_lesions_t1: RangeInclusive<usize>,
    pub n_new: RangeInclusive<usize>,
    pub n_vanish: RangeInclusive<usize>,
    pub lesion_radius_mm: RangeInclusive<f64>,
    /// Allowed total-lesion-volume ratio between consecutive timepoints.
    pub volume_change_band: (f64, f64),
    pub noise_sigma: f64,
    pub intensity_levels: IntensityLevels,
    /// Interval between consecutive scans in years.
    pub interval_years: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            n_lesions_t1: 3..=5,
            n_new: 1..=2,
            n_vanish: 0..=1,
            lesion_radius_mm: 2.0..=4.0,
            volume_change_band: (0.8, 1.2),
            noise_sigma: 0.02,
            intensity_levels: IntensityLevels::default(),
            interval_years: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!(
                "phantom shape {:?} too small; every axis must be >= 16",
                self.shape
            )));
        }
        let (low, high) = self.volume_change_band;
        if !(low < 1.0 && 1.0 < high && low > 0.0) {
            return Err(Error::Config(format!(
                "volume_change_band must satisfy 0 < low < 1 < high, got ({low}, {high})"
            )));
        }
        let min_spacing = self.spacing.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        if *self.lesion_radius_mm.start() < min_spacing {
            return Err(Error::Config(
                "lesion radius below one voxel cannot be rasterized".into(),
            ));
        }
        if self.lesion_radius_mm.is_empty() {
            return Err(Error::Config("empty lesion radius range".into()));
        }
        if self.n_vanish.start() > self.n_lesions_t1.start() {
            return Err(Error::Config(
                "n_vanish cannot always exceed the number of first-timepoint lesions".into(),
            ));
        }
        if !(self.interval_years > 0.0) {
            return Err(Error::Config("interval_years must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ geometry

/// Maximum radial modulation of the lesion surface.
const MAX_PERTURB: f64 = 0.12;
/// Lowest and highest radius rescale a lesion can ever take across its life.
const SCALE_MIN: f64 = 0.62;
const SCALE_MAX: f64 = 1.12;
/// Clearance in mm between lesion extents (and to the WM boundary) at
/// placement time, evaluated at the maximum possible scale.
const CLEARANCE_MM: f64 = 0.6;

/// A lesion: sphere with a smooth low-frequency radial modulation.
#[derive(Debug, Clone)]
struct Lesion {
    center: [f64; 3],
    radius_mm: f64,
    mode_amp: [f64; 3],
    mode_phase: [f64; 3],
}

impl Lesion {
    fn sample(rng: &mut ChaCha8Rng, center: [f64; 3], radius_mm: f64) -> Lesion {
        let mode_amp = [
            rng.gen_range(0.0..MAX_PERTURB / 3.0),
            rng.gen_range(0.0..MAX_PERTURB / 3.0),
            rng.gen_range(0.0..MAX_PERTURB / 3.0),
        ];
        let mode_phase = [
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ];
        Lesion {
            center,
            radius_mm,
            mode_amp,
            mode_phase,
        }
    }

    /// Largest radius the surface can reach in any direction at `scale`.
    fn max_extent(&self, scale: f64) -> f64 {
        self.radius_mm * scale * (1.0 + MAX_PERTURB)
    }

    /// Surface radius along direction `d` (unnormalized), in mm.
    fn surface_radius(&self, d: [f64; 3], scale: f64) -> f64 {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
        let u = [d[0] / norm, d[1] / norm, d[2] / norm];
        let m = 1.0
            + self.mode_amp[0] * (3.0 * u[0] + self.mode_phase[0]).cos()
            + self.mode_amp[1] * (3.0 * u[1] + self.mode_phase[1]).cos()
            + self.mode_amp[2] * (2.0 * (u[2] + u[0]) + self.mode_phase[2]).cos();
        self.radius_mm * scale * m
    }

    fn contains_mm(&self, p: [f64; 3], scale: f64) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if dist > self.max_extent(scale) {
            return false;
        }
        dist <= self.surface_radius(d, scale)
    }
}

/// Brain geometry: outer ellipsoid (cortex) and inner WM ellipsoid.
struct BrainGeometry {
    center: [f64; 3],
    outer_semi: [f64; 3],
    inner_semi: [f64; 3],
}

impl BrainGeometry {
    fn new(cfg: &PhantomConfig) -> BrainGeometry {
        let extent = [
            cfg.shape[0] as f64 * cfg.spacing[0] as f64,
            cfg.shape[1] as f64 * cfg.spacing[1] as f64,
            cfg.shape[2] as f64 * cfg.spacing[2] as f64,
        ];
        BrainGeometry {
            center: [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0],
            outer_semi: [extent[0] * 0.44, extent[1] * 0.44, extent[2] * 0.44],
            inner_semi: [extent[0] * 0.36, extent[1] * 0.36, extent[2] * 0.36],
        }
    }

    /// Normalized ellipsoid radius of `p` (<= 1 means inside).
    fn scaled_radius(&self, p: [f64; 3], semi: &[f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / semi[a];
            s += d * d;
        }
        s.sqrt()
    }

    fn in_brain(&self, p: [f64; 3]) -> bool {
        self.scaled_radius(p, &self.outer_semi) <= 1.0
    }

    fn in_wm(&self, p: [f64; 3]) -> bool {
        self.scaled_radius(p, &self.inner_semi) <= 1.0
    }

    /// True when every point within `margin_mm` of `p` is inside WM.
    /// The scaled radius is (1 / min semi-axis)-Lipschitz in mm, so pulling
    /// the threshold in by `margin / min_semi` is a sound bound.
    fn in_wm_with_margin(&self, p: [f64; 3], margin_mm: f64) -> bool {
        let min_semi = self
            .inner_semi
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if margin_mm >= min_semi {
            return false;
        }
        self.scaled_radius(p, &self.inner_semi) <= 1.0 - margin_mm / min_semi
    }
}

fn voxel_center_mm(idx: [usize; 3], spacing: [f32; 3]) -> [f64; 3] {
    [
        (idx[0] as f64 + 0.5) * spacing[0] as f64,
        (idx[1] as f64 + 0.5) * spacing[1] as f64,
        (idx[2] as f64 + 0.5) * spacing[2] as f64,
    ]
}

// --------------------------------------------------------------- generation

const PLACEMENT_ATTEMPTS: usize = 500;
const EVOLUTION_ATTEMPTS: usize = 16;

/// Place a lesion of roughly `radius_mm` that stays inside WM and clear of
/// `existing` lesions at every scale it could ever take.
fn place_lesion(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    geo: &BrainGeometry,
    existing: &[Lesion],
    radius_mm: f64,
) -> Result<Lesion> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = [
            rng.gen_range(0.0..geo.center[0] * 2.0),
            rng.gen_range(0.0..geo.center[1] * 2.0),
            rng.gen_range(0.0..geo.center[2] * 2.0),
        ];
        let candidate = Lesion::sample(rng, p, radius_mm);
        if !geo.in_wm_with_margin(p, candidate.max_extent(SCALE_MAX) + CLEARANCE_MM) {
            continue;
        }
        let clear = existing.iter().all(|other| {
            let d = [
                other.center[0] - p[0],
                other.center[1] - p[1],
                other.center[2] - p[2],
            ];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            dist > other.max_extent(SCALE_MAX) + candidate.max_extent(SCALE_MAX) + CLEARANCE_MM
        });
        if clear {
            return Ok(candidate);
        }
    }
    Err(Error::Placement {
        attempts: PLACEMENT_ATTEMPTS,
        reason: format!(
            "could not fit a lesion inside white matter for shape {:?} and radius range {:?}",
            cfg.shape, cfg.lesion_radius_mm
        ),
    })
}

/// Rasterize the union of lesions (with per-lesion radius scales).
fn rasterize_lesions(cfg: &PhantomConfig, lesions: &[(Lesion, f64)]) -> Array3<f32> {
    let [nx, ny, nz] = cfg.shape;
    let mut mask = Array3::<f32>::zeros((nx, ny, nz));
    for (lesion, scale) in lesions {
        let reach = lesion.max_extent(*scale);
        let lo = |c: f64, s: f32| (((c - reach) / s as f64).floor().max(0.0)) as usize;
        let hi = |c: f64, s: f32, n: usize| {
            (((c + reach) / s as f64).ceil() as usize).min(n.saturating_sub(1))
        };
        let (x0, x1) = (
            lo(lesion.center[0], cfg.spacing[0]),
            hi(lesion.center[0], cfg.spacing[0], nx),
        );
        let (y0, y1) = (
            lo(lesion.center[1], cfg.spacing[1]),
            hi(lesion.center[1], cfg.spacing[1], ny),
        );
        let (z0, z1) = (
            lo(lesion.center[2], cfg.spacing[2]),
            hi(lesion.center[2], cfg.spacing[2], nz),
        );
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    if mask[[x, y, z]] == 0.0
                        && lesion.contains_mm(voxel_center_mm([x, y, z], cfg.spacing), *scale)
                    {
                        mask[[x, y, z]] = 1.0;
                    }
                }
            }
        }
    }
    mask
}

fn count(mask: &Array3<f32>) -> usize {
    mask.iter().filter(|&&v| v != 0.0).count()
}

/// Lesion population at one timepoint; each entry carries the radius scale
/// relative to its birth radius.
#[derive(Debug, Clone)]
struct Population {
    lesions: Vec<(Lesion, f64)>,
}

impl Population {
    fn rasterize(&self, cfg: &PhantomConfig) -> Array3<f32> {
        rasterize_lesions(cfg, &self.lesions)
    }
}

struct EvolutionStep {
    next: Population,
    vanished: Vec<(Lesion, f64)>,
    added: Vec<(Lesion, f64)>,
}

/// Radius (mm) of a sphere covering roughly `voxels` voxels.
fn radius_for_voxels(voxels: f64, voxel_volume: f64) -> f64 {
    (3.0 * voxels.max(1.0) * voxel_volume / (4.0 * std::f64::consts::PI)).cbrt()
}

/// One evolution attempt: pick vanishers, add new lesions sized to the
/// remaining volume budget, then jitter and rescale the survivors until the
/// voxelized volume ratio lands in the band.
fn evolve_once(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    geo: &BrainGeometry,
    current: &Population,
    v_prev: f64,
) -> Result<EvolutionStep> {
    let n_vanish = rng
        .gen_range(*cfg.n_vanish.start()..=*cfg.n_vanish.end())
        .min(current.lesions.len().saturating_sub(1));
    let n_new = rng.gen_range(*cfg.n_new.start()..=*cfg.n_new.end());

    let mut indices: Vec<usize> = (0..current.lesions.len()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let vanish_set: Vec<usize> = indices.into_iter().take(n_vanish).collect();
    let mut remaining: Vec<(Lesion, f64)> = Vec::new();
    let mut vanished: Vec<(Lesion, f64)> = Vec::new();
    for (i, entry) in current.lesions.iter().enumerate() {
        if vanish_set.contains(&i) {
            vanished.push(entry.clone());
        } else {
            remaining.push(entry.clone());
        }
    }

    // Volume budget for the new lesions: aim at a ratio well inside the
    // band, then size new lesions to fit what the survivors cannot absorb.
    let v_remaining = count(&rasterize_lesions(cfg, &remaining)) as f64;
    let target_ratio = rng.gen_range(0.94..1.06);
    let budget_voxels = (target_ratio * v_prev - v_remaining).max(0.0);
    let voxel_volume =
        cfg.spacing[0] as f64 * cfg.spacing[1] as f64 * cfg.spacing[2] as f64;

    // New lesions must clear every current lesion, vanishers included, so
    // the vanishing label can never overlap the next population.
    let mut spacing_set: Vec<Lesion> =
        current.lesions.iter().map(|(l, _)| l.clone()).collect();
    let mut added: Vec<(Lesion, f64)> = Vec::new();
    for _ in 0..n_new {
        let share = budget_voxels / n_new as f64;
        let radius = radius_for_voxels(share, voxel_volume).clamp(
            *cfg.lesion_radius_mm.start(),
            *cfg.lesion_radius_mm.end(),
        );
        let lesion = place_lesion(rng, cfg, geo, &spacing_set, radius)?;
        spacing_set.push(lesion.clone());
        added.push((lesion, 1.0));
    }

    // Per-lesion volume jitter on the survivors.
    for entry in &mut remaining {
        entry.1 = (entry.1 * rng.gen_range(0.96..1.04)).clamp(SCALE_MIN, SCALE_MAX);
    }

    let (band_low, band_high) = cfg.volume_change_band;
    // Aim inside the band with headroom for voxelization error.
    let margin = (band_high - band_low) * 0.15;
    let target_low = band_low + margin;
    let target_high = band_high - margin;

    let assemble = |scale: f64, remaining: &[(Lesion, f64)]| -> Population {
        let mut lesions: Vec<(Lesion, f64)> = remaining
            .iter()
            .map(|(l, s)| (l.clone(), (s * scale).clamp(SCALE_MIN, SCALE_MAX)))
            .collect();
        lesions.extend(added.iter().cloned());
        Population { lesions }
    };
    let ratio_of = |scale: f64, remaining: &[(Lesion, f64)]| -> f64 {
        count(&assemble(scale, remaining).rasterize(cfg)) as f64 / v_prev
    };

    let mut lo = SCALE_MIN;
    let mut hi = SCALE_MAX;
    let mut scale = 1.0;
    let mut ratio = ratio_of(scale, &remaining);
    for _ in 0..24 {
        if ratio > target_high {
            hi = scale;
        } else if ratio < target_low {
            lo = scale;
        } else {
            break;
        }
        scale = 0.5 * (lo + hi);
        ratio = ratio_of(scale, &remaining);
    }
    if !(band_low..=band_high).contains(&ratio) {
        return Err(Error::Placement {
            attempts: 24,
            reason: format!(
                "volume ratio {ratio:.3} cannot be brought into [{band_low}, {band_high}]"
            ),
        });
    }

    Ok(EvolutionStep {
        next: assemble(scale, &remaining),
        vanished,
        added,
    })
}

fn evolve(
    rng: &mut ChaCha8Rng,
    cfg: &PhantomConfig,
    geo: &BrainGeometry,
    current: &Population,
) -> Result<EvolutionStep> {
    let v_prev = count(&current.rasterize(cfg)) as f64;
    let mut last_err = None;
    for _ in 0..EVOLUTION_ATTEMPTS {
        match evolve_once(rng, cfg, geo, current, v_prev) {
            Ok(step) => return Ok(step),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Rendered state for one timepoint.
struct Rendered {
    image: Volume3D,
    wm_mask: Volume3D,
    lesion_mask: Array3<f32>,
}

fn render(
    cfg: &PhantomConfig,
    geo: &BrainGeometry,
    population: &Population,
    noise_rng: &mut ChaCha8Rng,
) -> Result<Rendered> {
    let [nx, ny, nz] = cfg.shape;
    let lesion_mask = population.rasterize(cfg);
    let mut wm = Array3::<f32>::zeros((nx, ny, nz));
    let mut image = Array3::<f32>::zeros((nx, ny, nz));
    let levels = &cfg.intensity_levels;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let p = voxel_center_mm([x, y, z], cfg.spacing);
                let value = if geo.in_wm(p) {
                    wm[[x, y, z]] = 1.0;
                    if lesion_mask[[x, y, z]] != 0.0 {
                        levels.lesion
                    } else {
                        levels.white_matter
                    }
                } else if geo.in_brain(p) {
                    levels.gray_matter
                } else {
                    levels.background
                };
                image[[x, y, z]] = value as f32;
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            let n: f64 = sample_gaussian(noise_rng);
            *v += (n * cfg.noise_sigma) as f32;
        }
    }
    Ok(Rendered {
        image: Volume3D::new(image, cfg.spacing)?,
        wm_mask: Volume3D {
            data: wm,
            spacing: cfg.spacing,
            dtype: Dtype::Uint8,
        },
        lesion_mask,
    })
}

/// Box-Muller, one sample per call.
fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn mask_volume(data: Array3<f32>, spacing: [f32; 3]) -> Volume3D {
    Volume3D {
        data,
        spacing,
        dtype: Dtype::Uint8,
    }
}

fn subject_rng(cfg: &PhantomConfig, subject_seed: u64, stream: u64) -> ChaCha8Rng {
    // Distinct, order-independent stream per (suite seed, subject, purpose).
    ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(subject_seed.wrapping_mul(0xd1b5_4a32_d192_ed03))
            .wrapping_add(stream),
    )
}

/// Generate a two-timepoint subject with full ground-truth labels.
pub fn generate_subject(cfg: &PhantomConfig, subject_seed: u64) -> Result<SubjectRecord> {
    generate_multi_timepoint_subject(cfg, 2, subject_seed)
}

/// Generate a subject with `n_timepoints >= 1` chained timepoints; every
/// consecutive pair satisfies the pairwise evolution contract.
pub fn generate_multi_timepoint_subject(
    cfg: &PhantomConfig,
    n_timepoints: usize,
    subject_seed: u64,
) -> Result<SubjectRecord> {
    cfg.validate()?;
    if n_timepoints == 0 {
        return Err(Error::Config("at least one timepoint required".into()));
    }
    let geo = BrainGeometry::new(cfg);
    let mut structure_rng = subject_rng(cfg, subject_seed, 1);
    let mut noise_rng = subject_rng(cfg, subject_seed, 2);

    let n_initial =
        structure_rng.gen_range(*cfg.n_lesions_t1.start()..=*cfg.n_lesions_t1.end());
    let mut lesions: Vec<Lesion> = Vec::new();
    for _ in 0..n_initial {
        let radius = structure_rng
            .gen_range(*cfg.lesion_radius_mm.start()..=*cfg.lesion_radius_mm.end());
        let lesion = place_lesion(&mut structure_rng, cfg, &geo, &lesions, radius)?;
        lesions.push(lesion);
    }
    let mut population = Population {
        lesions: lesions.into_iter().map(|l| (l, 1.0)).collect(),
    };

    let mut rendered = vec![render(cfg, &geo, &population, &mut noise_rng)?];
    let mut labels: Vec<LabelSet> = Vec::new();

    for _ in 1..n_timepoints {
        let step = evolve(&mut structure_rng, cfg, &geo, &population)?;
        let prev_mask = rendered
            .last()
            .expect("at least one timepoint")
            .lesion_mask
            .clone();
        let next_rendered = render(cfg, &geo, &step.next, &mut noise_rng)?;
        let new_mask = rasterize_lesions(cfg, &step.added);
        let vanish_mask = rasterize_lesions(cfg, &step.vanished);
        labels.push(LabelSet {
            all_t1: Some(mask_volume(prev_mask, cfg.spacing)),
            all_t2: Some(mask_volume(
                next_rendered.lesion_mask.clone(),
                cfg.spacing,
            )),
            new_t2: Some(mask_volume(new_mask, cfg.spacing)),
            vanish_t2: Some(mask_volume(vanish_mask, cfg.spacing)),
        });
        rendered.push(next_rendered);
        population = step.next;
    }

    if n_timepoints == 1 {
        labels.push(LabelSet {
            all_t1: Some(mask_volume(rendered[0].lesion_mask.clone(), cfg.spacing)),
            ..Default::default()
        });
    }

    let timepoints = rendered
        .into_iter()
        .enumerate()
        .map(|(t, r)| Timepoint {
            image: r.image,
            wm_mask: Some(r.wm_mask),
            offset_years: t as f64 * cfg.interval_years,
        })
        .collect();

    let record = SubjectRecord {
        subject_id: format!("subject_{subject_seed:04}"),
        timepoints,
        labels,
    };
    record.validate()?;
    Ok(record)
}

// ----------------------------------------------------------------- the suite

/// The five heterogeneous dataset shapes the suite replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteDataset {
    /// Longitudinal, all-lesion labels at both timepoints.
    Ph2015,
    /// Cross-sectional, all-lesion label at the single timepoint.
    Ph2016,
    /// Longitudinal, new-lesion labels only.
    PhSeg2,
    /// Longitudinal, first-timepoint all-lesion plus new-lesion labels.
    PhSeg2Plus,
    /// Longitudinal, vanishing-lesion labels only (inverted timepoints).
    PhVan,
}

impl SuiteDataset {
    pub const ALL: [SuiteDataset; 5] = [
        SuiteDataset::Ph2015,
        SuiteDataset::Ph2016,
        SuiteDataset::PhSeg2,
        SuiteDataset::PhSeg2Plus,
        SuiteDataset::PhVan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteDataset::Ph2015 => "PH-2015",
            SuiteDataset::Ph2016 => "PH-2016",
            SuiteDataset::PhSeg2 => "PH-SEG2",
            SuiteDataset::PhSeg2Plus => "PH-SEG2+",
            SuiteDataset::PhVan => "PH-VAN",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            SuiteDataset::Ph2015 => "ph2015",
            SuiteDataset::Ph2016 => "ph2016",
            SuiteDataset::PhSeg2 => "phseg2",
            SuiteDataset::PhSeg2Plus => "phseg2plus",
            SuiteDataset::PhVan => "phvan",
        }
    }

    pub fn from_name(name: &str) -> Option<SuiteDataset> {
        SuiteDataset::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(name) || d.dir_name() == name)
    }

    pub fn format(self) -> DatasetFormat {
        match self {
            SuiteDataset::Ph2016 => DatasetFormat::CrossSectional,
            _ => DatasetFormat::Longitudinal,
        }
    }

    /// Labels exposed to training.
    pub fn availability(self) -> LabelAvailability {
        match self {
            SuiteDataset::Ph2015 => LabelAvailability {
                all_t1: true,
                all_t2: true,
                ..Default::default()
            },
            SuiteDataset::Ph2016 => LabelAvailability {
                all_t1: true,
                ..Default::default()
            },
            SuiteDataset::PhSeg2 => LabelAvailability {
                new_t2: true,
                ..Default::default()
            },
            SuiteDataset::PhSeg2Plus => LabelAvailability {
                all_t1: true,
                new_t2: true,
                ..Default::default()
            },
            SuiteDataset::PhVan => LabelAvailability {
                vanish_t2: true,
                ..Default::default()
            },
        }
    }

    /// Labels written to the hidden oracle directory for evaluation. The
    /// vanishing-lesion dataset mirrors its real counterpart, where no
    /// all-lesion ground truth exists at all; the cross-sectional dataset
    /// only ever has a first timepoint; every other dataset gets the
    /// generator's full ground truth.
    pub fn oracle_availability(self) -> LabelAvailability {
        match self {
            SuiteDataset::Ph2016 => LabelAvailability {
                all_t1: true,
                ..Default::default()
            },
            SuiteDataset::PhVan => LabelAvailability {
                vanish_t2: true,
                ..Default::default()
            },
            _ => LabelAvailability::all(),
        }
    }

    fn seed_stream(self) -> u64 {
        match self {
            SuiteDataset::Ph2015 => 1_000,
            SuiteDataset::Ph2016 => 2_000,
            SuiteDataset::PhSeg2 => 3_000,
            SuiteDataset::PhSeg2Plus => 4_000,
            SuiteDataset::PhVan => 5_000,
        }
    }
}

/// Swap the two timepoints of a record, relabeling ground truth to match:
/// new lesions of the forward pair become the vanishing lesions of the
/// inverted pair and vice versa. Image intensities are untouched.
pub fn invert_timepoints(record: &SubjectRecord) -> Result<SubjectRecord> {
    if record.timepoints.len() != 2 {
        return Err(Error::Validation(
            "timepoint inversion is defined for two-timepoint records".into(),
        ));
    }
    let forward = &record.labels[0];
    let labels = LabelSet {
        all_t1: forward.all_t2.clone(),
        all_t2: forward.all_t1.clone(),
        new_t2: forward.vanish_t2.clone(),
        vanish_t2: forward.new_t2.clone(),
    };
    let offsets: Vec<f64> = record.timepoints.iter().map(|t| t.offset_years).collect();
    let mut timepoints: Vec<Timepoint> = record.timepoints.iter().rev().cloned().collect();
    for (t, tp) in timepoints.iter_mut().enumerate() {
        tp.offset_years = offsets[t];
    }
    let inverted = SubjectRecord {
        subject_id: record.subject_id.clone(),
        timepoints,
        labels: vec![labels],
    };
    inverted.validate()?;
    Ok(inverted)
}

/// Keep only the first timepoint of a record (cross-sectional reduction).
fn first_timepoint_only(record: &SubjectRecord) -> SubjectRecord {
    SubjectRecord {
        subject_id: record.subject_id.clone(),
        timepoints: vec![record.timepoints[0].clone()],
        labels: vec![LabelSet {
            all_t1: record.labels[0].all_t1.clone(),
            ..Default::default()
        }],
    }
}

fn restrict_labels(ls: &LabelSet, availability: LabelAvailability) -> LabelSet {
    LabelSet {
        all_t1: availability.all_t1.then(|| ls.all_t1.clone()).flatten(),
        all_t2: availability.all_t2.then(|| ls.all_t2.clone()).flatten(),
        new_t2: availability.new_t2.then(|| ls.new_t2.clone()).flatten(),
        vanish_t2: availability.vanish_t2.then(|| ls.vanish_t2.clone()).flatten(),
    }
}

/// A generated dataset: exposed manifest plus hidden oracle manifest.
pub struct SuiteOutput {
    pub dataset: SuiteDataset,
    pub manifest_path: PathBuf,
    pub oracle_manifest_path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Where a record doc's image volumes live: written next to the manifest or
/// referenced from another directory via a relative prefix.
enum ImageSource {
    WriteHere,
    Reference(String),
}

fn write_record(
    out_dir: &Path,
    record: &SubjectRecord,
    availability: LabelAvailability,
    split: Split,
    images: &ImageSource,
) -> Result<RecordDoc> {
    let sid = &record.subject_id;
    let mut timepoints = Vec::new();
    for (t, tp) in record.timepoints.iter().enumerate() {
        let image_rel = format!("{sid}/t{t}_image.nii");
        let wm_rel = format!("{sid}/t{t}_wm.nii");
        let (image_ref, wm_ref) = match images {
            ImageSource::WriteHere => {
                write_volume(&tp.image, out_dir.join(&image_rel))?;
                if let Some(wm) = &tp.wm_mask {
                    write_volume(wm, out_dir.join(&wm_rel))?;
                }
                (image_rel, wm_rel)
            }
            ImageSource::Reference(prefix) => {
                (format!("{prefix}/{image_rel}"), format!("{prefix}/{wm_rel}"))
            }
        };
        timepoints.push(TimepointDoc {
            image: image_ref,
            wm_mask: tp.wm_mask.as_ref().map(|_| wm_ref),
            offset_years: Some(tp.offset_years),
        });
    }

    let mut labels = Vec::new();
    for (p, ls) in record.labels.iter().enumerate() {
        let exposed = restrict_labels(ls, availability);
        let pair = if record.timepoints.len() == 1 {
            [0, 0]
        } else {
            [p, p + 1]
        };
        let write_label =
            |mask: &Option<Volume3D>, field: &str| -> Result<Option<String>> {
                mask.as_ref()
                    .map(|m| -> Result<String> {
                        let rel = format!("{sid}/pair{p}_{field}.nii");
                        write_volume(m, out_dir.join(&rel))?;
                        Ok(rel)
                    })
                    .transpose()
            };
        labels.push(LabelEntryDoc {
            pair,
            all_t1: write_label(&exposed.all_t1, "all_t1")?,
            all_t2: write_label(&exposed.all_t2, "all_t2")?,
            new_t2: write_label(&exposed.new_t2, "new_t2")?,
            vanish_t2: write_label(&exposed.vanish_t2, "vanish_t2")?,
        });
    }

    Ok(RecordDoc {
        subject_id: sid.clone(),
        split,
        timepoints,
        labels,
    })
}

/// Fraction of each dataset assigned to the test split (at least one test
/// record whenever there are two or more subjects).
const TEST_FRACTION: f64 = 0.25;

/// Generate the five-dataset phantom suite under `out_dir`.
///
/// Exposed manifests match the heterogeneous availability pattern. Hidden
/// ground truth goes to `out_dir/oracle/<dataset>/`, which training never
/// reads; oracle manifests reference the exposed image files rather than
/// copying them.
pub fn generate_suite(
    cfg: &PhantomConfig,
    n_subjects_per_dataset: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<SuiteOutput>> {
    cfg.validate()?;
    if n_subjects_per_dataset == 0 {
        return Err(Error::Config(
            "need at least one subject per dataset".into(),
        ));
    }
    let out_dir = out_dir.as_ref();
    let mut outputs = Vec::new();
    for dataset in SuiteDataset::ALL {
        let records: Vec<Result<SubjectRecord>> =
            exec::map_indexed(n_subjects_per_dataset, |i| {
                let seed = dataset.seed_stream() + i as u64;
                let record = generate_subject(cfg, seed)?;
                match dataset {
                    SuiteDataset::Ph2016 => Ok(first_timepoint_only(&record)),
                    SuiteDataset::PhVan => invert_timepoints(&record),
                    _ => Ok(record),
                }
            });
        let records: Vec<SubjectRecord> = records.into_iter().collect::<Result<Vec<_>>>()?;

        let n_test = ((n_subjects_per_dataset as f64 * TEST_FRACTION).round() as usize)
            .clamp(
                usize::from(n_subjects_per_dataset > 1),
                n_subjects_per_dataset - 1,
            );
        let split_of = |i: usize| {
            if i + n_test >= n_subjects_per_dataset {
                Split::Test
            } else {
                Split::Train
            }
        };

        let ds_dir = out_dir.join(dataset.dir_name());
        let oracle_dir = out_dir.join("oracle").join(dataset.dir_name());
        let image_prefix = format!("../../{}", dataset.dir_name());

        let mut exposed_docs = Vec::new();
        let mut oracle_docs = Vec::new();
        for (i, record) in records.iter().enumerate() {
            exposed_docs.push(write_record(
                &ds_dir,
                record,
                dataset.availability(),
                split_of(i),
                &ImageSource::WriteHere,
            )?);
            oracle_docs.push(write_record(
                &oracle_dir,
                record,
                dataset.oracle_availability(),
                split_of(i),
                &ImageSource::Reference(image_prefix.clone()),
            )?);
        }

        let exposed = ManifestDoc {
            name: dataset.name().to_string(),
            format: dataset.format(),
            availability: dataset.availability(),
            records: exposed_docs,
        };
        let oracle = ManifestDoc {
            name: format!("{}-oracle", dataset.name()),
            format: dataset.format(),
            availability: dataset.oracle_availability(),
            records: oracle_docs,
        };
        let manifest_path = ds_dir.join("manifest.json");
        let oracle_manifest_path = oracle_dir.join("manifest.json");
        save_manifest_doc(&exposed, &manifest_path)?;
        save_manifest_doc(&oracle, &oracle_manifest_path)?;

        let manifest = crate::manifest::resolve_manifest(&exposed, &ds_dir)?;
        outputs.push(SuiteOutput {
            dataset,
            manifest_path,
            oracle_manifest_path,
            manifest,
        });
    }
    Ok(outputs)
}
