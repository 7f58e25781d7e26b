//! Packing heterogeneous records into the fixed 4-channel network input.
//!
//! The channel order is fixed: first-timepoint image, second-timepoint
//! image, first-timepoint all-lesion label (or a zero volume when the
//! dataset lacks it), and the second-timepoint white matter mask.
//! Cross-sectional records reuse the single timepoint as both scans with a
//! zero inter-scan interval; multi-timepoint records are covered by
//! width-2, stride-1 sliding windows.

use crate::error::{Error, Result};
use crate::labels::LabelAvailability;
use crate::manifest::SubjectRecord;
use crate::volume::Volume3D;

/// The packed 4-channel input for one timepoint pair.
#[derive(Debug, Clone)]
pub struct InputBundle {
    pub x_t1: Volume3D,
    pub x_t2: Volume3D,
    /// All-lesion mask of the first timepoint, or all-zero when unavailable.
    pub y_a_t1_channel: Volume3D,
    pub wm_t2: Volume3D,
    /// Label availability carried through from the manifest.
    pub availability: LabelAvailability,
    pub interval_years: f64,
}

impl InputBundle {
    pub fn shape(&self) -> [usize; 3] {
        self.x_t1.shape()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.x_t1.spacing
    }

    /// Channels in their fixed order.
    pub fn channels(&self) -> [&Volume3D; 4] {
        [&self.x_t1, &self.x_t2, &self.y_a_t1_channel, &self.wm_t2]
    }

    /// True when the pair covers two distinct timepoints.
    pub fn is_longitudinal(&self) -> bool {
        self.interval_years > 0.0
    }
}

/// Width-2, stride-1 window pairs covering a record's timepoints.
///
/// `n` timepoints yield `(0,1), (1,2), ..., (n-2, n-1)`; a single-timepoint
/// record yields the degenerate pair `(0, 0)`.
pub fn sliding_windows(record: &SubjectRecord) -> Vec<(usize, usize)> {
    let n = record.timepoints.len();
    if n <= 1 {
        vec![(0, 0)]
    } else {
        (0..n - 1).map(|i| (i, i + 1)).collect()
    }
}

/// Pack one timepoint pair of a record into an [`InputBundle`].
///
/// The degenerate pair `(i, i)` substitutes the same scan for both inputs
/// with a zero interval. A missing first-timepoint all-lesion label becomes
/// a zero channel. The white matter mask of the second element is a
/// required input channel.
pub fn pack_inputs(
    record: &SubjectRecord,
    pair: (usize, usize),
    manifest_availability: LabelAvailability,
) -> Result<InputBundle> {
    let (i, j) = pair;
    let n = record.timepoints.len();
    if i >= n || j >= n {
        return Err(Error::Range(format!(
            "pair ({i}, {j}) out of range for {n} timepoint(s)"
        )));
    }
    if j != i && j != i + 1 {
        return Err(Error::Range(format!(
            "pair ({i}, {j}) is not a consecutive or degenerate pair"
        )));
    }

    let tp1 = &record.timepoints[i];
    let tp2 = &record.timepoints[j];

    let wm_t2 = tp2.wm_mask.clone().ok_or_else(|| {
        Error::Assembly(format!(
            "record {}: timepoint {j} has no white matter mask, a required input channel",
            record.subject_id
        ))
    })?;

    let x_t1 = tp1.image.clone();
    let x_t2 = tp2.image.clone();
    if !x_t1.compatible_with(&x_t2) || !x_t1.compatible_with(&wm_t2) {
        return Err(Error::Validation(format!(
            "record {}: channel shape/spacing mismatch",
            record.subject_id
        )));
    }

    // Label entry index for this pair: labels[i] covers (i, i+1); a
    // degenerate pair reads labels[0] when it exists.
    let label_index = if j == i { 0 } else { i };
    let labels = record.labels.get(label_index);
    let stored_all_t1 = labels.and_then(|ls| ls.all_t1.as_ref());

    let y_a_t1_channel = match (manifest_availability.all_t1, stored_all_t1) {
        (true, Some(mask)) => {
            if !mask.compatible_with(&x_t1) {
                return Err(Error::Validation(format!(
                    "record {}: all_t1 label shape/spacing mismatch",
                    record.subject_id
                )));
            }
            mask.clone()
        }
        _ => Volume3D::zeros(x_t1.shape(), x_t1.spacing),
    };

    let interval_years = if j == i {
        0.0
    } else {
        tp2.offset_years - tp1.offset_years
    };

    Ok(InputBundle {
        x_t1,
        x_t2,
        y_a_t1_channel,
        wm_t2,
        availability: manifest_availability,
        interval_years,
    })
}

/// Crop all four channels identically to a `size`-shaped patch at `origin`.
/// With `pad` enabled, out-of-bounds regions are zero-filled.
pub fn extract_patch(
    bundle: &InputBundle,
    origin: [isize; 3],
    size: [usize; 3],
    pad: bool,
) -> Result<InputBundle> {
    Ok(InputBundle {
        x_t1: bundle.x_t1.crop(origin, size, pad)?,
        x_t2: bundle.x_t2.crop(origin, size, pad)?,
        y_a_t1_channel: bundle.y_a_t1_channel.crop(origin, size, pad)?,
        wm_t2: bundle.wm_t2.crop(origin, size, pad)?,
        availability: bundle.availability,
        interval_years: bundle.interval_years,
    })
}
