//! Data augmentation: one spatial transform shared by every channel and
//! label, intensity transforms on the image channels only.
//!
//! The spatial map composes axis flips, a rotation about a random axis, and
//! a smooth elastic displacement field. Images are sampled trilinearly,
//! masks and labels nearest-neighbor, all through the same map, so labels
//! stay aligned with the images. Pure flips keep voxels on the grid and are
//! exact for both interpolators.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::InputBundle;
use crate::labels::LabelSet;
use crate::volume::Volume3D;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub flip_prob: f64,
    /// Maximum rotation angle (degrees) about a randomly chosen axis.
    pub max_rotation_deg: f64,
    /// Elastic deformation: control-grid spacing in mm.
    pub elastic_grid_mm: f64,
    /// Elastic deformation: maximum displacement per component in mm;
    /// 0 disables elastic deformation.
    pub elastic_max_mm: f64,
    /// Additive brightness offset range.
    pub brightness_add: (f64, f64),
    /// Multiplicative brightness factor range.
    pub brightness_mul: (f64, f64),
    /// Additive Gaussian noise sigma for image channels.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            elastic_grid_mm: 16.0,
            elastic_max_mm: 1.5,
            brightness_add: (-0.05, 0.05),
            brightness_mul: (0.95, 1.05),
            noise_sigma: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: augment becomes a no-op.
    pub fn disabled() -> AugmentConfig {
        AugmentConfig {
            flip_prob: 0.0,
            max_rotation_deg: 0.0,
            elastic_grid_mm: 16.0,
            elastic_max_mm: 0.0,
            brightness_add: (0.0, 0.0),
            brightness_mul: (1.0, 1.0),
            noise_sigma: 0.0,
        }
    }

    /// Exact transforms only (flips), for tests that require preserved
    /// topology.
    pub fn flips_only(flip_prob: f64) -> AugmentConfig {
        AugmentConfig {
            flip_prob,
            ..AugmentConfig::disabled()
        }
    }

    fn is_identity_spatial(&self) -> bool {
        self.max_rotation_deg == 0.0 && self.elastic_max_mm == 0.0
    }
}

/// The sampled transform for one augmentation call.
struct SpatialMap {
    flips: [bool; 3],
    rotation: Option<(usize, f64)>, // (axis, radians)
    displacement: Option<DisplacementField>,
    shape: [usize; 3],
    spacing: [f32; 3],
}

struct DisplacementField {
    grid: [usize; 3],
    grid_spacing_mm: f64,
    // Per grid node, one displacement vector component per field.
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
}

impl DisplacementField {
    fn sample(&self, p_mm: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let g = |v: f64| v / self.grid_spacing_mm;
        let (fx, fy, fz) = (g(p_mm[0]), g(p_mm[1]), g(p_mm[2]));
        let node = |f: f64, n: usize| -> (usize, usize, f64) {
            let i0 = (f.floor().max(0.0) as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (f - i0 as f64).clamp(0.0, 1.0))
        };
        let (x0, x1, tx) = node(fx, self.grid[0]);
        let (y0, y1, ty) = node(fy, self.grid[1]);
        let (z0, z1, tz) = node(fz, self.grid[2]);
        let idx = |x: usize, y: usize, z: usize| (x * self.grid[1] + y) * self.grid[2] + z;
        for (c, field) in [&self.dx, &self.dy, &self.dz].iter().enumerate() {
            let mut acc = 0.0;
            for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
                for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                    for (z, wz) in [(z0, 1.0 - tz), (z1, tz)] {
                        acc += field[idx(x, y, z)] * wx * wy * wz;
                    }
                }
            }
            out[c] = acc;
        }
        out
    }
}

impl SpatialMap {
    fn sample(rng: &mut ChaCha8Rng, cfg: &AugmentConfig, shape: [usize; 3], spacing: [f32; 3]) -> SpatialMap {
        let flips = [
            rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)),
            rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)),
            rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)),
        ];
        let rotation = if cfg.max_rotation_deg > 0.0 {
            let axis = rng.gen_range(0..3usize);
            let deg = rng.gen_range(-cfg.max_rotation_deg..cfg.max_rotation_deg);
            Some((axis, deg.to_radians()))
        } else {
            None
        };
        let displacement = if cfg.elastic_max_mm > 0.0 {
            let extent = [
                shape[0] as f64 * spacing[0] as f64,
                shape[1] as f64 * spacing[1] as f64,
                shape[2] as f64 * spacing[2] as f64,
            ];
            let grid_spacing = cfg.elastic_grid_mm.max(2.0);
            let grid = [
                (extent[0] / grid_spacing).ceil() as usize + 2,
                (extent[1] / grid_spacing).ceil() as usize + 2,
                (extent[2] / grid_spacing).ceil() as usize + 2,
            ];
            let n = grid[0] * grid[1] * grid[2];
            let mut field = || -> Vec<f64> {
                (0..n)
                    .map(|_| rng.gen_range(-cfg.elastic_max_mm..cfg.elastic_max_mm))
                    .collect()
            };
            Some(DisplacementField {
                grid,
                grid_spacing_mm: grid_spacing,
                dx: field(),
                dy: field(),
                dz: field(),
            })
        } else {
            None
        };
        SpatialMap {
            flips,
            rotation,
            displacement,
            shape,
            spacing,
        }
    }

    fn is_pure_flip(&self) -> bool {
        self.rotation.is_none() && self.displacement.is_none()
    }

    /// Source voxel coordinate (continuous) for an output voxel index.
    fn source_of(&self, out_idx: [usize; 3]) -> [f64; 3] {
        let mut idx = [0f64; 3];
        for a in 0..3 {
            let i = out_idx[a] as f64;
            idx[a] = if self.flips[a] {
                (self.shape[a] - 1) as f64 - i
            } else {
                i
            };
        }
        if self.is_pure_flip() {
            return idx;
        }
        // Work in mm around the volume center.
        let mut p = [0f64; 3];
        for a in 0..3 {
            p[a] = (idx[a] + 0.5) * self.spacing[a] as f64;
        }
        let center = [
            self.shape[0] as f64 * self.spacing[0] as f64 / 2.0,
            self.shape[1] as f64 * self.spacing[1] as f64 / 2.0,
            self.shape[2] as f64 * self.spacing[2] as f64 / 2.0,
        ];
        if let Some((axis, angle)) = self.rotation {
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (s, c) = angle.sin_cos();
            let du = p[u] - center[u];
            let dv = p[v] - center[v];
            p[u] = center[u] + c * du - s * dv;
            p[v] = center[v] + s * du + c * dv;
        }
        if let Some(field) = &self.displacement {
            let d = field.sample(p);
            p[0] += d[0];
            p[1] += d[1];
            p[2] += d[2];
        }
        [
            p[0] / self.spacing[0] as f64 - 0.5,
            p[1] / self.spacing[1] as f64 - 0.5,
            p[2] / self.spacing[2] as f64 - 0.5,
        ]
    }
}

/// Trilinear interpolation with zero fill outside the volume.
fn sample_trilinear(data: &Array3<f32>, q: [f64; 3]) -> f32 {
    let dims = data.dim();
    let n = [dims.0 as isize, dims.1 as isize, dims.2 as isize];
    let base = [
        q[0].floor() as isize,
        q[1].floor() as isize,
        q[2].floor() as isize,
    ];
    let t = [
        q[0] - base[0] as f64,
        q[1] - base[1] as f64,
        q[2] - base[2] as f64,
    ];
    let fetch = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= n[0] || y >= n[1] || z >= n[2] {
            0.0
        } else {
            data[[x as usize, y as usize, z as usize]] as f64
        }
    };
    let mut acc = 0.0f64;
    for (dx, wx) in [(0, 1.0 - t[0]), (1, t[0])] {
        for (dy, wy) in [(0, 1.0 - t[1]), (1, t[1])] {
            for (dz, wz) in [(0, 1.0 - t[2]), (1, t[2])] {
                let w = wx * wy * wz;
                if w != 0.0 {
                    acc += fetch(base[0] + dx, base[1] + dy, base[2] + dz) * w;
                }
            }
        }
    }
    acc as f32
}

fn sample_nearest(data: &Array3<f32>, q: [f64; 3]) -> f32 {
    let (n0, n1, n2) = data.dim();
    let r = |v: f64, n: usize| -> Option<usize> {
        let i = v.round();
        if i < 0.0 || i >= n as f64 {
            None
        } else {
            Some(i as usize)
        }
    };
    match (r(q[0], n0), r(q[1], n1), r(q[2], n2)) {
        (Some(x), Some(y), Some(z)) => data[[x, y, z]],
        _ => 0.0,
    }
}

fn warp(v: &Volume3D, map: &SpatialMap, nearest: bool) -> Volume3D {
    let [n0, n1, n2] = v.shape();
    let data = Array3::from_shape_fn((n0, n1, n2), |(x, y, z)| {
        let q = map.source_of([x, y, z]);
        if nearest {
            sample_nearest(&v.data, q)
        } else {
            sample_trilinear(&v.data, q)
        }
    });
    Volume3D {
        data,
        spacing: v.spacing,
        dtype: v.dtype,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Apply one augmentation draw to a bundle and its labels.
///
/// Deterministic given `seed`. The identical spatial transform hits every
/// channel and label (masks via nearest-neighbor); brightness and noise hit
/// the two image channels only.
pub fn augment(
    bundle: &InputBundle,
    labels: &LabelSet,
    cfg: &AugmentConfig,
    seed: u64,
) -> (InputBundle, LabelSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = SpatialMap::sample(&mut rng, cfg, bundle.shape(), bundle.spacing());

    let spatial_identity =
        map.is_pure_flip() && !map.flips.iter().any(|&f| f) && cfg.is_identity_spatial();

    let (mut x_t1, mut x_t2, y_chan, wm, out_labels);
    if spatial_identity {
        x_t1 = bundle.x_t1.clone();
        x_t2 = bundle.x_t2.clone();
        y_chan = bundle.y_a_t1_channel.clone();
        wm = bundle.wm_t2.clone();
        out_labels = labels.clone();
    } else {
        x_t1 = warp(&bundle.x_t1, &map, false);
        x_t2 = warp(&bundle.x_t2, &map, false);
        y_chan = warp(&bundle.y_a_t1_channel, &map, true);
        wm = warp(&bundle.wm_t2, &map, true);
        out_labels = LabelSet {
            all_t1: labels.all_t1.as_ref().map(|m| warp(m, &map, true)),
            all_t2: labels.all_t2.as_ref().map(|m| warp(m, &map, true)),
            new_t2: labels.new_t2.as_ref().map(|m| warp(m, &map, true)),
            vanish_t2: labels.vanish_t2.as_ref().map(|m| warp(m, &map, true)),
        };
    }

    // Intensity transforms: image channels only.
    let add = rng.gen_range(cfg.brightness_add.0..=cfg.brightness_add.1);
    let mul = rng.gen_range(cfg.brightness_mul.0..=cfg.brightness_mul.1);
    let mut apply_intensity = |v: &mut Volume3D| {
        for x in v.data.iter_mut() {
            let mut value = *x as f64 * mul + add;
            if cfg.noise_sigma > 0.0 {
                value += gaussian(&mut rng) * cfg.noise_sigma;
            }
            *x = value as f32;
        }
    };
    apply_intensity(&mut x_t1);
    apply_intensity(&mut x_t2);

    (
        InputBundle {
            x_t1,
            x_t2,
            y_a_t1_channel: y_chan,
            wm_t2: wm,
            availability: bundle.availability,
            interval_years: bundle.interval_years,
        },
        out_labels,
    )
}
