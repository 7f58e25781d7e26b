//! 3D scalar volumes with voxel spacing.
//!
//! A [`Volume3D`] carries images, probability maps, and binary masks. Data is
//! row-major `(x, y, z)` with the last axis contiguous, matching the on-disk
//! payload order of both supported file formats.

use ndarray::Array3;

use crate::error::{Error, Result};

/// On-disk element type. Masks are stored as `Uint8`, everything else as
/// `Float32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::Float32 => 0,
            Dtype::Uint8 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dtype::Float32),
            1 => Some(Dtype::Uint8),
            _ => None,
        }
    }
}

/// A 3D scalar grid with per-axis voxel size in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
    pub dtype: Dtype,
}

impl Volume3D {
    /// Build a float volume, validating finiteness and spacing.
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let v = Volume3D {
            data,
            spacing,
            dtype: Dtype::Float32,
        };
        v.validate_basic()?;
        Ok(v)
    }

    /// Build a binary mask volume; values must be exactly 0 or 1.
    pub fn new_mask(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let v = Volume3D {
            data,
            spacing,
            dtype: Dtype::Uint8,
        };
        v.validate_basic()?;
        if !v.is_binary() {
            return Err(Error::Validation(
                "mask volume contains values other than 0 and 1".into(),
            ));
        }
        Ok(v)
    }

    /// All-zero float volume with the given shape and spacing.
    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume3D {
            data: Array3::zeros((shape[0], shape[1], shape[2])),
            spacing,
            dtype: Dtype::Float32,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (a, b, c) = self.data.dim();
        [a, b, c]
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Volume of a single voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] as f64 * self.spacing[1] as f64 * self.spacing[2] as f64
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    fn validate_basic(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Validation("volume has zero voxels".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!(
                "spacing components must be strictly positive and finite, got {:?}",
                self.spacing
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "volume contains non-finite value {bad}"
            )));
        }
        Ok(())
    }

    /// Check shape and spacing agreement with another volume.
    pub fn compatible_with(&self, other: &Volume3D) -> bool {
        self.shape() == other.shape() && self.spacing == other.spacing
    }

    /// Crop a `size`-shaped box at `origin`. With `pad` enabled, regions
    /// outside the volume are zero-filled; otherwise the box must fit.
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3], pad: bool) -> Result<Volume3D> {
        let shape = self.shape();
        if !pad {
            for axis in 0..3 {
                let end = origin[axis] + size[axis] as isize;
                if origin[axis] < 0 || end > shape[axis] as isize {
                    return Err(Error::Range(format!(
                        "patch [{:?} + {:?}] exceeds volume shape {:?} and padding is disabled",
                        origin, size, shape
                    )));
                }
            }
        }
        let mut out = Array3::<f32>::zeros((size[0], size[1], size[2]));
        for i in 0..size[0] {
            let si = origin[0] + i as isize;
            if si < 0 || si >= shape[0] as isize {
                continue;
            }
            for j in 0..size[1] {
                let sj = origin[1] + j as isize;
                if sj < 0 || sj >= shape[1] as isize {
                    continue;
                }
                for k in 0..size[2] {
                    let sk = origin[2] + k as isize;
                    if sk < 0 || sk >= shape[2] as isize {
                        continue;
                    }
                    out[[i, j, k]] = self.data[[si as usize, sj as usize, sk as usize]];
                }
            }
        }
        Ok(Volume3D {
            data: out,
            spacing: self.spacing,
            dtype: self.dtype,
        })
    }

    /// Data as a flat f64 vector in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Rebuild a volume from flat f64 data (used for predictions).
    pub fn from_f64(data: &[f64], shape: [usize; 3], spacing: [f32; 3]) -> Result<Volume3D> {
        if data.len() != shape[0] * shape[1] * shape[2] {
            return Err(Error::Validation(format!(
                "flat data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let arr = Array3::from_shape_vec(
            (shape[0], shape[1], shape[2]),
            data.iter().map(|&v| v as f32).collect(),
        )
        .expect("length checked above");
        Volume3D::new(arr, spacing)
    }

    /// Count of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Binarize at `threshold`, producing a mask volume.
    pub fn binarize(&self, threshold: f32) -> Volume3D {
        Volume3D {
            data: self.data.mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            spacing: self.spacing,
            dtype: Dtype::Uint8,
        }
    }
}
