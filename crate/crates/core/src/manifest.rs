//! Dataset manifests: subject records, availability flags, and JSON I/O.
//!
//! A manifest is a JSON document listing subjects, their timepoint volumes,
//! and which label kinds the dataset provides. All file paths are relative
//! to the manifest file. Loading resolves and validates every referenced
//! volume eagerly; a loaded manifest is self-contained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::load_volume;
use crate::labels::{LabelAvailability, LabelSet};
use crate::volume::Volume3D;

/// Whether the dataset has one timepoint per subject or several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    CrossSectional,
    Longitudinal,
}

/// Train/test split assignment for one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One scan: image, optional white matter mask, acquisition offset in years.
#[derive(Debug, Clone, PartialEq)]
pub struct Timepoint {
    pub image: Volume3D,
    pub wm_mask: Option<Volume3D>,
    pub offset_years: f64,
}

/// One subject's ordered timepoints plus per-consecutive-pair labels.
///
/// `labels[i]` belongs to the pair `(i, i + 1)`; a single-timepoint record
/// has one entry for the degenerate pair `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub timepoints: Vec<Timepoint>,
    pub labels: Vec<LabelSet>,
}

impl SubjectRecord {
    pub fn n_timepoints(&self) -> usize {
        self.timepoints.len()
    }

    /// Expected number of label entries for this record.
    pub fn n_pairs(&self) -> usize {
        self.timepoints.len().max(2) - 1
    }

    pub fn shape(&self) -> [usize; 3] {
        self.timepoints[0].image.shape()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.timepoints[0].image.spacing
    }

    /// Validate internal consistency: ordering, shapes, label arity.
    pub fn validate(&self) -> Result<()> {
        if self.timepoints.is_empty() {
            return Err(Error::Validation(format!(
                "record {}: at least one timepoint required",
                self.subject_id
            )));
        }
        for w in self.timepoints.windows(2) {
            if !(w[1].offset_years > w[0].offset_years) {
                return Err(Error::Validation(format!(
                    "record {}: acquisition offsets must be strictly increasing",
                    self.subject_id
                )));
            }
        }
        if self.timepoints[0].offset_years < 0.0 {
            return Err(Error::Validation(format!(
                "record {}: negative acquisition offset",
                self.subject_id
            )));
        }
        let reference = &self.timepoints[0].image;
        for (t, tp) in self.timepoints.iter().enumerate() {
            if !tp.image.compatible_with(reference) {
                return Err(Error::Validation(format!(
                    "record {}: timepoint {t} image shape/spacing mismatch",
                    self.subject_id
                )));
            }
            if let Some(wm) = &tp.wm_mask {
                if !wm.compatible_with(reference) {
                    return Err(Error::Validation(format!(
                        "record {}: timepoint {t} wm mask shape/spacing mismatch",
                        self.subject_id
                    )));
                }
                if !wm.is_binary() {
                    return Err(Error::Validation(format!(
                        "record {}: timepoint {t} wm mask is not binary",
                        self.subject_id
                    )));
                }
            }
        }
        if self.labels.len() > self.n_pairs() {
            return Err(Error::Validation(format!(
                "record {}: {} label entries for {} timepoint pair(s)",
                self.subject_id,
                self.labels.len(),
                self.n_pairs()
            )));
        }
        for (p, ls) in self.labels.iter().enumerate() {
            for (name, mask) in ls.present() {
                if !mask.compatible_with(reference) {
                    return Err(Error::Validation(format!(
                        "record {}: pair {p} label {name} shape/spacing mismatch",
                        self.subject_id
                    )));
                }
                if !mask.is_binary() {
                    return Err(Error::Validation(format!(
                        "record {}: pair {p} label {name} is not binary",
                        self.subject_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A record plus its split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub record: SubjectRecord,
    pub split: Split,
}

/// A named collection of subject records with fixed label availability.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub format: DatasetFormat,
    pub availability: LabelAvailability,
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn records_for(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.records
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| &e.record)
    }

    pub fn n_records(&self, split: Split) -> usize {
        self.records_for(split).count()
    }
}

// --------------------------------------------------------------- JSON schema

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub name: String,
    pub format: DatasetFormat,
    pub availability: LabelAvailability,
    pub records: Vec<RecordDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordDoc {
    pub subject_id: String,
    pub split: Split,
    pub timepoints: Vec<TimepointDoc>,
    #[serde(default)]
    pub labels: Vec<LabelEntryDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimepointDoc {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm_mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_years: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEntryDoc {
    /// Zero-based timepoint pair `[i, j]`; `j = i + 1`, or `[0, 0]` for a
    /// single-timepoint record.
    pub pair: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_t1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all_t2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_t2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanish_t2: Option<String>,
}

/// Write a manifest document as pretty JSON (stable field order).
pub fn save_manifest_doc(doc: &ManifestDoc, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let json = serde_json::to_string_pretty(doc)?;
    std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Load, resolve, and validate a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_manifest(&doc, base)
}

fn resolve_path(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

fn load_label(
    base: &Path,
    record: &str,
    field: &'static str,
    available: bool,
    rel: &Option<String>,
) -> Result<Option<Volume3D>> {
    match (available, rel) {
        (true, Some(rel)) => {
            let p = resolve_path(base, rel);
            if !p.exists() {
                return Err(Error::Consistency(format!(
                    "record {record}: {field} declared available but {} is missing",
                    p.display()
                )));
            }
            Ok(Some(load_volume(p)?))
        }
        (true, None) => Err(Error::Consistency(format!(
            "record {record}: availability declares {field} but the record lacks it"
        ))),
        (false, Some(_)) => Err(Error::Consistency(format!(
            "record {record}: {field} present but the dataset does not declare it available"
        ))),
        (false, None) => Ok(None),
    }
}

/// Resolve a manifest document against its base directory.
pub fn resolve_manifest(doc: &ManifestDoc, base: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::with_capacity(doc.records.len());
    for rd in &doc.records {
        if doc.format == DatasetFormat::CrossSectional && rd.timepoints.len() != 1 {
            return Err(Error::Validation(format!(
                "record {}: cross-sectional dataset but {} timepoints",
                rd.subject_id,
                rd.timepoints.len()
            )));
        }
        let mut timepoints = Vec::with_capacity(rd.timepoints.len());
        for (t, td) in rd.timepoints.iter().enumerate() {
            let image = load_volume(resolve_path(base, &td.image))?;
            let wm_mask = td
                .wm_mask
                .as_ref()
                .map(|rel| load_volume(resolve_path(base, rel)))
                .transpose()?;
            timepoints.push(Timepoint {
                image,
                wm_mask,
                offset_years: td.offset_years.unwrap_or(t as f64),
            });
        }

        let n_pairs = timepoints.len().max(2) - 1;
        let mut labels = vec![LabelSet::default(); n_pairs];
        for le in &rd.labels {
            let [i, j] = le.pair;
            let pair_index = if timepoints.len() == 1 {
                if le.pair != [0, 0] {
                    return Err(Error::Validation(format!(
                        "record {}: single-timepoint record must use pair [0, 0]",
                        rd.subject_id
                    )));
                }
                0
            } else {
                if j != i + 1 || j >= timepoints.len() {
                    return Err(Error::Validation(format!(
                        "record {}: label pair [{i}, {j}] is not a valid consecutive pair",
                        rd.subject_id
                    )));
                }
                i
            };
            let av = doc.availability;
            labels[pair_index] = LabelSet {
                all_t1: load_label(base, &rd.subject_id, "all_t1", av.all_t1, &le.all_t1)?,
                all_t2: load_label(base, &rd.subject_id, "all_t2", av.all_t2, &le.all_t2)?,
                new_t2: load_label(base, &rd.subject_id, "new_t2", av.new_t2, &le.new_t2)?,
                vanish_t2: load_label(
                    base,
                    &rd.subject_id,
                    "vanish_t2",
                    av.vanish_t2,
                    &le.vanish_t2,
                )?,
            };
        }

        // Every pair entry must match the declared availability exactly.
        if doc.availability.any() {
            let declared = rd
                .labels
                .iter()
                .map(|le| le.pair)
                .collect::<std::collections::HashSet<_>>();
            let expected: Vec<[usize; 2]> = if timepoints.len() == 1 {
                vec![[0, 0]]
            } else {
                (0..n_pairs).map(|i| [i, i + 1]).collect()
            };
            for pair in expected {
                if !declared.contains(&pair) {
                    return Err(Error::Consistency(format!(
                        "record {}: availability declares labels but pair {:?} has no entry",
                        rd.subject_id, pair
                    )));
                }
            }
        }

        let record = SubjectRecord {
            subject_id: rd.subject_id.clone(),
            timepoints,
            labels,
        };
        record.validate()?;
        records.push(RecordEntry {
            record,
            split: rd.split,
        });
    }

    Ok(DatasetManifest {
        name: doc.name.clone(),
        format: doc.format,
        availability: doc.availability,
        records,
    })
}
