//! Label sets for a pair of timepoints.
//!
//! Four annotation styles coexist across datasets: all-lesion masks at
//! either timepoint, new-lesion masks (present at the second timepoint
//! only), and vanishing-lesion masks (present at the first timepoint
//! only). Any subset may be present for a given record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Which of the four label kinds a dataset (or record pair) provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LabelAvailability {
    pub all_t1: bool,
    pub all_t2: bool,
    pub new_t2: bool,
    pub vanish_t2: bool,
}

impl LabelAvailability {
    pub fn all() -> Self {
        LabelAvailability {
            all_t1: true,
            all_t2: true,
            new_t2: true,
            vanish_t2: true,
        }
    }

    pub fn none() -> Self {
        LabelAvailability::default()
    }

    pub fn any(&self) -> bool {
        self.all_t1 || self.all_t2 || self.new_t2 || self.vanish_t2
    }
}

/// The label masks available for one consecutive timepoint pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    pub all_t1: Option<Volume3D>,
    pub all_t2: Option<Volume3D>,
    pub new_t2: Option<Volume3D>,
    pub vanish_t2: Option<Volume3D>,
}

/// One violated consistency rule, with the number of offending voxels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: ConsistencyRule,
    pub voxels: usize,
}

/// The pairwise relations that must hold between label kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyRule {
    /// New lesions cannot already be present at the first timepoint.
    NewDisjointFromAllT1,
    /// New lesions must be contained in the second-timepoint all-lesion mask.
    NewSubsetOfAllT2,
    /// Vanishing lesions must be contained in the first-timepoint all-lesion mask.
    VanishSubsetOfAllT1,
    /// Vanishing lesions cannot still be present at the second timepoint.
    VanishDisjointFromAllT2,
}

impl std::fmt::Display for ConsistencyRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConsistencyRule::NewDisjointFromAllT1 => "new_t2 ∧ all_t1 = ∅",
            ConsistencyRule::NewSubsetOfAllT2 => "new_t2 ⊆ all_t2",
            ConsistencyRule::VanishSubsetOfAllT1 => "vanish_t2 ⊆ all_t1",
            ConsistencyRule::VanishDisjointFromAllT2 => "vanish_t2 ∧ all_t2 = ∅",
        };
        f.write_str(s)
    }
}

impl LabelSet {
    pub fn availability(&self) -> LabelAvailability {
        LabelAvailability {
            all_t1: self.all_t1.is_some(),
            all_t2: self.all_t2.is_some(),
            new_t2: self.new_t2.is_some(),
            vanish_t2: self.vanish_t2.is_some(),
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.availability().any()
    }

    /// Iterate present masks with a field name, for shape checks.
    pub fn present(&self) -> impl Iterator<Item = (&'static str, &Volume3D)> {
        [
            ("all_t1", self.all_t1.as_ref()),
            ("all_t2", self.all_t2.as_ref()),
            ("new_t2", self.new_t2.as_ref()),
            ("vanish_t2", self.vanish_t2.as_ref()),
        ]
        .into_iter()
        .filter_map(|(name, v)| v.map(|v| (name, v)))
    }

    /// Crop every present mask identically (used for patch extraction).
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3], pad: bool) -> Result<LabelSet> {
        let crop_opt = |m: &Option<Volume3D>| -> Result<Option<Volume3D>> {
            m.as_ref().map(|v| v.crop(origin, size, pad)).transpose()
        };
        Ok(LabelSet {
            all_t1: crop_opt(&self.all_t1)?,
            all_t2: crop_opt(&self.all_t2)?,
            new_t2: crop_opt(&self.new_t2)?,
            vanish_t2: crop_opt(&self.vanish_t2)?,
        })
    }
}

/// Count voxels where `a` is set and `pred(b)` holds.
fn count_joint(a: &Volume3D, b: &Volume3D, pred: impl Fn(f32) -> bool) -> usize {
    a.data
        .iter()
        .zip(b.data.iter())
        .filter(|&(&av, &bv)| av != 0.0 && pred(bv))
        .count()
}

/// Check every subset/disjointness rule whose two operands are both present.
///
/// Returns the list of violated rules with offending voxel counts; an empty
/// list means every checkable rule holds.
pub fn validate_label_consistency(ls: &LabelSet) -> Result<Vec<Violation>> {
    if ls.is_empty() {
        return Err(Error::Validation(
            "label consistency check requires at least one present label".into(),
        ));
    }
    let mut reference: Option<&Volume3D> = None;
    for (name, v) in ls.present() {
        if !v.is_binary() {
            return Err(Error::Validation(format!("label {name} is not binary")));
        }
        match reference {
            None => reference = Some(v),
            Some(r) => {
                if !r.compatible_with(v) {
                    return Err(Error::Validation(format!(
                        "label {name} shape/spacing disagrees with the other labels"
                    )));
                }
            }
        }
    }

    let mut violations = Vec::new();
    let mut check = |rule: ConsistencyRule, count: usize| {
        if count > 0 {
            violations.push(Violation {
                rule,
                voxels: count,
            });
        }
    };

    if let (Some(new), Some(all_t1)) = (&ls.new_t2, &ls.all_t1) {
        check(
            ConsistencyRule::NewDisjointFromAllT1,
            count_joint(new, all_t1, |b| b != 0.0),
        );
    }
    if let (Some(new), Some(all_t2)) = (&ls.new_t2, &ls.all_t2) {
        check(
            ConsistencyRule::NewSubsetOfAllT2,
            count_joint(new, all_t2, |b| b == 0.0),
        );
    }
    if let (Some(vanish), Some(all_t1)) = (&ls.vanish_t2, &ls.all_t1) {
        check(
            ConsistencyRule::VanishSubsetOfAllT1,
            count_joint(vanish, all_t1, |b| b == 0.0),
        );
    }
    if let (Some(vanish), Some(all_t2)) = (&ls.vanish_t2, &ls.all_t2) {
        check(
            ConsistencyRule::VanishDisjointFromAllT2,
            count_joint(vanish, all_t2, |b| b != 0.0),
        );
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(bits: &[f32]) -> Volume3D {
        let n = bits.len();
        Volume3D::new_mask(
            Array3::from_shape_vec((n, 1, 1), bits.to_vec()).unwrap(),
            [1.0, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn consistent_set_is_clean() {
        let ls = LabelSet {
            all_t1: Some(mask(&[1.0, 1.0, 0.0, 0.0])),
            all_t2: Some(mask(&[1.0, 0.0, 1.0, 0.0])),
            new_t2: Some(mask(&[0.0, 0.0, 1.0, 0.0])),
            vanish_t2: Some(mask(&[0.0, 1.0, 0.0, 0.0])),
        };
        assert!(validate_label_consistency(&ls).unwrap().is_empty());
    }

    #[test]
    fn new_overlapping_all_t1_is_one_violation() {
        let ls = LabelSet {
            all_t1: Some(mask(&[1.0, 0.0, 0.0, 0.0])),
            new_t2: Some(mask(&[1.0, 0.0, 0.0, 0.0])),
            ..Default::default()
        };
        let v = validate_label_consistency(&ls).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, ConsistencyRule::NewDisjointFromAllT1);
        assert_eq!(v[0].voxels, 1);
    }

    #[test]
    fn lone_label_has_no_checkable_pair() {
        let ls = LabelSet {
            new_t2: Some(mask(&[1.0, 0.0])),
            ..Default::default()
        };
        assert!(validate_label_consistency(&ls).unwrap().is_empty());
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(validate_label_consistency(&LabelSet::default()).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let ls = LabelSet {
            all_t1: Some(mask(&[1.0, 0.0])),
            new_t2: Some(mask(&[0.0, 1.0, 0.0])),
            ..Default::default()
        };
        assert!(validate_label_consistency(&ls).is_err());
    }
}
