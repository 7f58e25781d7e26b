//! Suite evaluation: per-dataset, per-task Dice and lesion-wise F1 against
//! hidden oracle labels, with per-fold and ensemble rows, N/A entries where
//! oracle labels do not exist, and paired comparisons between runs.

use serde::{Deserialize, Serialize};

use super::{dice_score, lesion_f1, paired_t_test, Connectivity, TTestResult};
use crate::assembly::{pack_inputs, sliding_windows};
use crate::error::{Error, Result};
use crate::exec;
use crate::manifest::{DatasetManifest, Split, SubjectRecord};
use crate::model::{sliding_inference, Network, PredictionBundle};
use crate::volume::Volume3D;

pub const TASKS: [&str; 4] = ["all_t1", "all_t2", "new_t2", "vanish_t2"];

/// Evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Probability threshold for converting predictions to masks.
    pub threshold: f32,
    pub connectivity: Connectivity,
    pub min_overlap_voxels: usize,
    /// Tile overlap fraction for sliding inference.
    pub overlap: f64,
    /// Also evaluate every ensemble member individually.
    pub include_folds: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: 0.5,
            connectivity: Connectivity::TwentySix,
            min_overlap_voxels: 1,
            overlap: 0.25,
            include_folds: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseScore {
    pub subject_id: String,
    pub pair: usize,
    pub value: f64,
}

/// One (model, dataset, task, metric) aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub task: String,
    pub metric: String,
    /// `None` renders as N/A: the oracle has no labels for this task.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub n: usize,
    pub per_case: Vec<CaseScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub options: EvalOptions,
}

impl EvaluationReport {
    pub fn row(&self, model: &str, dataset: &str, task: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.model == model && r.dataset == dataset && r.task == task && r.metric == metric
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<EvaluationReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Plain-text table, one line per row.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<10} {:<10} {:<10} {:>8} {:>8} {:>4}\n",
            "model", "dataset", "task", "metric", "mean", "sd", "n"
        ));
        for r in &self.rows {
            let (mean, sd) = match (r.mean, r.sd) {
                (Some(m), Some(s)) => (format!("{m:.4}"), format!("{s:.4}")),
                (Some(m), None) => (format!("{m:.4}"), "-".to_string()),
                _ => ("N/A".to_string(), "N/A".to_string()),
            };
            out.push_str(&format!(
                "{:<10} {:<10} {:<10} {:<10} {:>8} {:>8} {:>4}\n",
                r.model, r.dataset, r.task, r.metric, mean, sd, r.n
            ));
        }
        out
    }
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn head_for_task<'a>(pred: &'a PredictionBundle, task: &str) -> &'a [f64] {
    match task {
        "all_t1" => &pred.p_all_t1,
        "all_t2" => &pred.p_all_t2,
        "new_t2" => &pred.p_new_t2,
        _ => &pred.p_vanish_t2,
    }
}

fn oracle_label<'a>(
    record: &'a SubjectRecord,
    pair_index: usize,
    task: &str,
) -> Option<&'a Volume3D> {
    let ls = record.labels.get(pair_index)?;
    match task {
        "all_t1" => ls.all_t1.as_ref(),
        "all_t2" => ls.all_t2.as_ref(),
        "new_t2" => ls.new_t2.as_ref(),
        _ => ls.vanish_t2.as_ref(),
    }
}

/// Predictions for every test record of one dataset, per model.
struct DatasetPredictions {
    /// `[record][window]` prediction bundles for the ensemble mean.
    ensemble: Vec<Vec<PredictionBundle>>,
    /// `[member][record][window]` for individual members (when requested).
    members: Vec<Vec<Vec<PredictionBundle>>>,
    subjects: Vec<String>,
}

fn predict_dataset(
    members: &[&Network],
    exposed: &DatasetManifest,
    oracle: &DatasetManifest,
    options: &EvalOptions,
) -> Result<DatasetPredictions> {
    // Pair exposed/oracle test records by subject id.
    let test_records: Vec<&SubjectRecord> = exposed.records_for(Split::Test).collect();
    for r in &test_records {
        if !oracle
            .records_for(Split::Test)
            .any(|o| o.subject_id == r.subject_id)
        {
            return Err(Error::Consistency(format!(
                "oracle manifest for {} lacks test subject {}",
                exposed.name, r.subject_id
            )));
        }
    }

    // [record][member][window]
    let nested: Vec<Result<Vec<Vec<PredictionBundle>>>> =
        exec::map_indexed(test_records.len(), |ri| {
            let record = test_records[ri];
            let windows = sliding_windows(record);
            let mut per_member: Vec<Vec<PredictionBundle>> = Vec::with_capacity(members.len());
            for network in members {
                let mut per_window = Vec::with_capacity(windows.len());
                for &window in &windows {
                    let bundle = pack_inputs(record, window, exposed.availability)?;
                    per_window.push(sliding_inference(network, &bundle, options.overlap)?);
                }
                per_member.push(per_window);
            }
            Ok(per_member)
        });

    let mut ensemble = Vec::new();
    let mut member_preds: Vec<Vec<Vec<PredictionBundle>>> = vec![Vec::new(); members.len()];
    let mut subjects = Vec::new();
    for (ri, result) in nested.into_iter().enumerate() {
        let per_member = result?;
        let n_windows = per_member[0].len();
        let mut mean_windows = Vec::with_capacity(n_windows);
        for w in 0..n_windows {
            let mut acc = per_member[0][w].clone();
            for member in per_member.iter().skip(1) {
                for (dst, src) in [
                    (&mut acc.p_all_t1, &member[w].p_all_t1),
                    (&mut acc.p_all_t2, &member[w].p_all_t2),
                    (&mut acc.p_new_t2, &member[w].p_new_t2),
                    (&mut acc.p_vanish_t2, &member[w].p_vanish_t2),
                ] {
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let k = members.len() as f64;
            for head in [
                &mut acc.p_all_t1,
                &mut acc.p_all_t2,
                &mut acc.p_new_t2,
                &mut acc.p_vanish_t2,
            ] {
                for v in head.iter_mut() {
                    *v /= k;
                }
            }
            mean_windows.push(acc);
        }
        ensemble.push(mean_windows);
        if options.include_folds {
            for (m, per_window) in per_member.into_iter().enumerate() {
                member_preds[m].push(per_window);
            }
        }
        subjects.push(test_records[ri].subject_id.clone());
    }
    Ok(DatasetPredictions {
        ensemble,
        members: if options.include_folds {
            member_preds
        } else {
            Vec::new()
        },
        subjects,
    })
}

fn score_model(
    model: &str,
    dataset: &DatasetManifest,
    oracle: &DatasetManifest,
    preds: &[Vec<PredictionBundle>],
    subjects: &[String],
    options: &EvalOptions,
    rows: &mut Vec<ReportRow>,
) -> Result<()> {
    for task in TASKS {
        let available = match task {
            "all_t1" => oracle.availability.all_t1,
            "all_t2" => oracle.availability.all_t2,
            "new_t2" => oracle.availability.new_t2,
            _ => oracle.availability.vanish_t2,
        };
        if !available {
            for metric in ["dice", "lesion_f1"] {
                rows.push(ReportRow {
                    model: model.to_string(),
                    dataset: dataset.name.clone(),
                    task: task.to_string(),
                    metric: metric.to_string(),
                    mean: None,
                    sd: None,
                    n: 0,
                    per_case: Vec::new(),
                });
            }
            continue;
        }

        let mut dice_cases = Vec::new();
        let mut f1_cases = Vec::new();
        for (ri, subject) in subjects.iter().enumerate() {
            let oracle_record = oracle
                .records_for(Split::Test)
                .find(|r| &r.subject_id == subject)
                .expect("checked during prediction");
            for (w, pred) in preds[ri].iter().enumerate() {
                let Some(gt) = oracle_label(oracle_record, w, task) else {
                    continue;
                };
                let mask = Volume3D::from_f64(
                    head_for_task(pred, task),
                    pred.shape,
                    gt.spacing,
                )?
                .binarize(options.threshold);
                dice_cases.push(CaseScore {
                    subject_id: subject.clone(),
                    pair: w,
                    value: dice_score(&mask, gt)?,
                });
                f1_cases.push(CaseScore {
                    subject_id: subject.clone(),
                    pair: w,
                    value: lesion_f1(&mask, gt, options.connectivity, options.min_overlap_voxels)?
                        .f1,
                });
            }
        }
        for (metric, cases) in [("dice", dice_cases), ("lesion_f1", f1_cases)] {
            let values: Vec<f64> = cases.iter().map(|c| c.value).collect();
            let (mean, sd) = mean_sd(&values);
            rows.push(ReportRow {
                model: model.to_string(),
                dataset: dataset.name.clone(),
                task: task.to_string(),
                metric: metric.to_string(),
                mean,
                sd,
                n: values.len(),
                per_case: cases,
            });
        }
    }
    Ok(())
}

/// Evaluate an ensemble over test-split records of every dataset, scoring
/// each task against the oracle labels (N/A where the oracle has none).
pub fn evaluate_suite(
    members: &[&Network],
    exposed: &[DatasetManifest],
    oracle: &[DatasetManifest],
    options: &EvalOptions,
) -> Result<EvaluationReport> {
    if members.is_empty() {
        return Err(Error::Config("ensemble has no members".into()));
    }
    if exposed.len() != oracle.len() {
        return Err(Error::Config(
            "exposed and oracle manifest lists must align".into(),
        ));
    }
    let mut rows = Vec::new();
    for (exp, ora) in exposed.iter().zip(oracle) {
        let preds = predict_dataset(members, exp, ora, options)?;
        score_model(
            "ensemble",
            exp,
            ora,
            &preds.ensemble,
            &preds.subjects,
            options,
            &mut rows,
        )?;
        for (m, member_preds) in preds.members.iter().enumerate() {
            score_model(
                &format!("fold{m}"),
                exp,
                ora,
                member_preds,
                &preds.subjects,
                options,
                &mut rows,
            )?;
        }
    }
    Ok(EvaluationReport {
        rows,
        options: options.clone(),
    })
}

// ------------------------------------------------------------- comparisons

/// Paired comparison of one metric row between two reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub task: String,
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub n: usize,
    pub t_test: TTestResult,
}

/// Paired t-tests between two evaluation reports over matching ensemble
/// rows; cases are paired by (subject, pair).
pub fn compare_reports(
    a: &EvaluationReport,
    b: &EvaluationReport,
) -> Result<Vec<ComparisonRow>> {
    let mut out = Vec::new();
    for row_a in a.rows.iter().filter(|r| r.model == "ensemble") {
        let Some(row_b) = b.row(&row_a.model, &row_a.dataset, &row_a.task, &row_a.metric) else {
            continue;
        };
        if row_a.per_case.len() < 2 {
            continue;
        }
        let mut paired_a = Vec::new();
        let mut paired_b = Vec::new();
        for case_a in &row_a.per_case {
            if let Some(case_b) = row_b
                .per_case
                .iter()
                .find(|c| c.subject_id == case_a.subject_id && c.pair == case_a.pair)
            {
                paired_a.push(case_a.value);
                paired_b.push(case_b.value);
            }
        }
        if paired_a.len() < 2 {
            continue;
        }
        let t_test = paired_t_test(&paired_a, &paired_b)?;
        out.push(ComparisonRow {
            dataset: row_a.dataset.clone(),
            task: row_a.task.clone(),
            metric: row_a.metric.clone(),
            mean_a: paired_a.iter().sum::<f64>() / paired_a.len() as f64,
            mean_b: paired_b.iter().sum::<f64>() / paired_b.len() as f64,
            n: paired_a.len(),
            t_test,
        });
    }
    Ok(out)
}
