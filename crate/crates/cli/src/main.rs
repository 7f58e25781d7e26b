//! Command-line pipeline: phantom synthesis, training, inference,
//! evaluation, and gradient checking.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 numerical
//! failure (NaN loss or a failed gradient check).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{artifacts_dir, RunConfig};
use hetseg_core::labels::LabelAvailability;
use hetseg_core::losses::gradcheck::{run as run_gradcheck, GradCheckConfig};
use hetseg_core::manifest::{load_manifest, DatasetManifest, Split};
use hetseg_core::metrics::report::{compare_reports, evaluate_suite, EvaluationReport};
use hetseg_core::metrics::svg::{bar_chart_svg, trajectory_svg};
use hetseg_core::metrics::volume_trajectory;
use hetseg_core::phantom::{generate_suite, SuiteDataset};
use hetseg_core::trainer::{
    all_lesion_series, load_ensemble, predict, save_ensemble, train_ensemble,
};
use hetseg_core::volume::Volume3D;
use hetseg_core::{exec, Error};

#[derive(Parser)]
#[command(
    name = "hetseg",
    about = "Heterogeneous longitudinal lesion segmentation pipeline",
    version
)]
struct Cli {
    /// JSON run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override for every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Force the single-worker sequential backend.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory (falls back to $SEGHEH_CACHE, then ./hetseg-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the five-dataset phantom suite plus a trajectory dataset.
    Synth(SynthArgs),
    /// Train the k-fold ensemble on generated manifests.
    Train(TrainArgs),
    /// Evaluate an ensemble against the hidden oracle labels.
    Eval(EvalArgs),
    /// Write per-window probability maps and masks for a manifest.
    Infer(InferArgs),
    /// Verify analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a stored evaluation report as a table and charts.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Subjects per dataset.
    #[arg(long)]
    subjects: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by `synth` (contains the dataset manifests).
    #[arg(long)]
    data: PathBuf,
    /// Cross-validation fold count override (1 = fast path).
    #[arg(long)]
    folds: Option<usize>,
    /// Disable loss terms by zeroing their weights: long, vol, spat.
    #[arg(long, value_delimiter = ',')]
    ablate_loss: Vec<String>,
    /// Restrict training to these dataset names (default: all five).
    #[arg(long, value_delimiter = ',')]
    datasets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Ensemble manifest (ensemble.json) produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Second ensemble manifest for a paired-t-test comparison.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Skip per-fold rows.
    #[arg(long)]
    ensemble_only: bool,
}

#[derive(Args)]
struct InferArgs {
    /// A dataset manifest to run inference on.
    #[arg(long)]
    manifest: PathBuf,
    /// Ensemble manifest produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Also write binarized masks at the configured threshold.
    #[arg(long)]
    masks: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check only these losses: dice, long, vol, spat.
    #[arg(long, value_delimiter = ',')]
    loss: Vec<String>,
    /// Random instances per loss.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON produced by `eval`.
    #[arg(long)]
    report: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        exec::set_sequential(true);
    }
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    let out_dir = artifacts_dir(cli.out.clone());

    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(&cfg, args, &out_dir),
        Command::Train(args) => cmd_train(&mut cfg, args, &out_dir),
        Command::Eval(args) => cmd_eval(&cfg, args, &out_dir),
        Command::Infer(args) => cmd_infer(&cfg, args, &out_dir),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Report(args) => cmd_report(args, &out_dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

// ------------------------------------------------------------------- synth

fn cmd_synth(
    cfg: &RunConfig,
    args: &SynthArgs,
    out_dir: &Path,
) -> hetseg_core::Result<ExitCode> {
    let subjects = args.subjects.unwrap_or(cfg.subjects_per_dataset);
    let outputs = generate_suite(&cfg.phantom, subjects, out_dir)?;

    // Trajectory dataset: multi-timepoint subjects with full labels, for
    // volume-trajectory evaluation. Not part of the five-dataset pattern.
    if cfg.trajectory_subjects > 0 && cfg.trajectory_timepoints >= 3 {
        write_trajectory_dataset(cfg, out_dir)?;
    }

    println!(
        "{:<10} {:<16} {:>5} {:>5}  {:<6} {:<6} {:<6} {:<9}",
        "dataset", "format", "train", "test", "all_t1", "all_t2", "new_t2", "vanish_t2"
    );
    let flag = |b: bool| if b { "yes" } else { "-" };
    for output in &outputs {
        let m = &output.manifest;
        let format = match m.format {
            hetseg_core::manifest::DatasetFormat::CrossSectional => "cross-sectional",
            hetseg_core::manifest::DatasetFormat::Longitudinal => "longitudinal",
        };
        println!(
            "{:<10} {:<16} {:>5} {:>5}  {:<6} {:<6} {:<6} {:<9}",
            m.name,
            format,
            m.n_records(Split::Train),
            m.n_records(Split::Test),
            flag(m.availability.all_t1),
            flag(m.availability.all_t2),
            flag(m.availability.new_t2),
            flag(m.availability.vanish_t2),
        );
    }
    println!("wrote suite under {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Trajectory manifest name (not one of the five suite datasets).
const TRAJECTORY_DIR: &str = "phtraj";

fn write_trajectory_dataset(cfg: &RunConfig, out_dir: &Path) -> hetseg_core::Result<()> {
    use hetseg_core::manifest::{save_manifest_doc, DatasetFormat, ManifestDoc};
    use hetseg_core::phantom::generate_multi_timepoint_subject;

    let dir = out_dir.join(TRAJECTORY_DIR);
    let mut records = Vec::new();
    for i in 0..cfg.trajectory_subjects {
        let record = generate_multi_timepoint_subject(
            &cfg.phantom,
            cfg.trajectory_timepoints,
            9_000 + i as u64,
        )?;
        records.push(record);
    }
    let mut docs = Vec::new();
    for record in &records {
        docs.push(write_full_record(&dir, record)?);
    }
    let doc = ManifestDoc {
        name: "PH-TRAJ".to_string(),
        format: DatasetFormat::Longitudinal,
        availability: LabelAvailability::all(),
        records: docs,
    };
    save_manifest_doc(&doc, dir.join("manifest.json"))
}

fn write_full_record(
    dir: &Path,
    record: &hetseg_core::manifest::SubjectRecord,
) -> hetseg_core::Result<hetseg_core::manifest::RecordDoc> {
    use hetseg_core::io::write_volume;
    use hetseg_core::manifest::{LabelEntryDoc, RecordDoc, TimepointDoc};

    let sid = &record.subject_id;
    let mut timepoints = Vec::new();
    for (t, tp) in record.timepoints.iter().enumerate() {
        let image = format!("{sid}/t{t}_image.nii");
        write_volume(&tp.image, dir.join(&image))?;
        let wm = tp
            .wm_mask
            .as_ref()
            .map(|m| -> hetseg_core::Result<String> {
                let rel = format!("{sid}/t{t}_wm.nii");
                write_volume(m, dir.join(&rel))?;
                Ok(rel)
            })
            .transpose()?;
        timepoints.push(TimepointDoc {
            image,
            wm_mask: wm,
            offset_years: Some(tp.offset_years),
        });
    }
    let mut labels = Vec::new();
    for (p, ls) in record.labels.iter().enumerate() {
        let mut entry = LabelEntryDoc {
            pair: [p, p + 1],
            all_t1: None,
            all_t2: None,
            new_t2: None,
            vanish_t2: None,
        };
        let save = |mask: &Option<Volume3D>, field: &str| -> hetseg_core::Result<Option<String>> {
            mask.as_ref()
                .map(|m| -> hetseg_core::Result<String> {
                    let rel = format!("{sid}/pair{p}_{field}.nii");
                    hetseg_core::io::write_volume(m, dir.join(&rel))?;
                    Ok(rel)
                })
                .transpose()
        };
        entry.all_t1 = save(&ls.all_t1, "all_t1")?;
        entry.all_t2 = save(&ls.all_t2, "all_t2")?;
        entry.new_t2 = save(&ls.new_t2, "new_t2")?;
        entry.vanish_t2 = save(&ls.vanish_t2, "vanish_t2")?;
        labels.push(entry);
    }
    Ok(RecordDoc {
        subject_id: sid.clone(),
        split: Split::Test,
        timepoints,
        labels,
    })
}

// ------------------------------------------------------------------- train

fn load_suite_manifests(
    data: &Path,
    names: &[String],
) -> hetseg_core::Result<Vec<DatasetManifest>> {
    let datasets: Vec<SuiteDataset> = if names.is_empty() {
        SuiteDataset::ALL.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                SuiteDataset::from_name(n).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown dataset {n}; expected one of {:?}",
                        SuiteDataset::ALL.map(|d| d.name())
                    ))
                })
            })
            .collect::<hetseg_core::Result<Vec<_>>>()?
    };
    datasets
        .iter()
        .map(|d| load_manifest(data.join(d.dir_name()).join("manifest.json")))
        .collect()
}

fn cmd_train(
    cfg: &mut RunConfig,
    args: &TrainArgs,
    out_dir: &Path,
) -> hetseg_core::Result<ExitCode> {
    if let Some(folds) = args.folds {
        cfg.train.folds = folds;
    }
    for term in &args.ablate_loss {
        match term.as_str() {
            "long" => cfg.train.weights.lambda_long = 0.0,
            "vol" => cfg.train.weights.lambda_vol = 0.0,
            "spat" => cfg.train.weights.lambda_spat = 0.0,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss term {other}; expected long, vol, or spat"
                )))
            }
        }
    }
    let manifests = load_suite_manifests(&args.data, &args.datasets)?;
    let folds = train_ensemble(&manifests, &cfg.model, &cfg.train)?;
    let manifest_path = save_ensemble(&folds, &cfg.model, out_dir)?;
    for fold in &folds {
        let last = fold.log.last().expect("nonempty log");
        println!(
            "fold {}: {} iterations, final total loss {:.6}",
            fold.fold,
            fold.log.len(),
            last.total
        );
    }
    println!("ensemble manifest: {}", manifest_path.display());
    Ok(ExitCode::SUCCESS)
}

// -------------------------------------------------------------------- eval

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out_dir: &Path) -> hetseg_core::Result<ExitCode> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let exposed = load_suite_manifests(&args.data, &[])?;
    let oracle: Vec<DatasetManifest> = SuiteDataset::ALL
        .iter()
        .map(|d| {
            load_manifest(
                args.data
                    .join("oracle")
                    .join(d.dir_name())
                    .join("manifest.json"),
            )
        })
        .collect::<hetseg_core::Result<Vec<_>>>()?;

    let checkpoints = load_ensemble(&args.model)?;
    let members: Vec<&hetseg_core::model::Network> =
        checkpoints.iter().map(|c| &c.network).collect();
    let mut options = cfg.eval.clone();
    if args.ensemble_only {
        options.include_folds = false;
    }
    let report = evaluate_suite(&members, &exposed, &oracle, &options)?;

    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    let table = report.render_table();
    std::fs::write(out_dir.join("report.txt"), &table)
        .map_err(|e| Error::io(out_dir.join("report.txt"), e))?;
    print!("{table}");

    // Volume trajectories for the multi-timepoint dataset, when present.
    let traj_manifest = args.data.join(TRAJECTORY_DIR).join("manifest.json");
    if traj_manifest.exists() {
        let traj = load_manifest(&traj_manifest)?;
        for entry in &traj.records {
            let record = &entry.record;
            let preds = predict(&members, record, traj.availability, options.overlap)?;
            let pred_series = all_lesion_series(record, &preds);
            let gt_series: Vec<Vec<f64>> = ground_truth_all_series(record);
            let tr = volume_trajectory(
                &pred_series,
                &gt_series,
                record.timepoints[0].image.voxel_volume_mm3(),
            )?;
            let svg = trajectory_svg(
                &tr,
                &format!("lesion volume trajectory: {}", record.subject_id),
            );
            let svg_path = out_dir.join(format!("trajectory_{}.svg", record.subject_id));
            std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
            let rho = tr
                .rho
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "undefined".to_string());
            println!("trajectory {}: rho = {rho}", record.subject_id);
        }
    }

    if let Some(other) = &args.compare {
        let other_checkpoints = load_ensemble(other)?;
        let other_members: Vec<&hetseg_core::model::Network> =
            other_checkpoints.iter().map(|c| &c.network).collect();
        let other_report = evaluate_suite(&other_members, &exposed, &oracle, &options)?;
        let comparisons = compare_reports(&report, &other_report)?;
        let path = out_dir.join("comparison.json");
        std::fs::write(&path, serde_json::to_string_pretty(&comparisons)?)
            .map_err(|e| Error::io(&path, e))?;
        for c in &comparisons {
            let p = if c.t_test.degenerate {
                "degenerate".to_string()
            } else {
                format!("{:.4}", c.t_test.p_value)
            };
            println!(
                "compare {} {} {}: mean {:.4} vs {:.4}, t = {:.3}, p = {p}",
                c.dataset, c.task, c.metric, c.mean_a, c.mean_b, c.t_test.t
            );
        }
    }
    println!("report written to {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

/// Ground-truth all-lesion mask series across timepoints.
fn ground_truth_all_series(record: &hetseg_core::manifest::SubjectRecord) -> Vec<Vec<f64>> {
    let mut series = Vec::new();
    if let Some(first) = record.labels[0].all_t1.as_ref() {
        series.push(first.to_f64());
    }
    for ls in &record.labels {
        if let Some(m) = ls.all_t2.as_ref() {
            series.push(m.to_f64());
        }
    }
    series
}

// ------------------------------------------------------------------- infer

fn cmd_infer(cfg: &RunConfig, args: &InferArgs, out_dir: &Path) -> hetseg_core::Result<ExitCode> {
    let manifest = load_manifest(&args.manifest)?;
    let checkpoints = load_ensemble(&args.model)?;
    let members: Vec<&hetseg_core::model::Network> =
        checkpoints.iter().map(|c| &c.network).collect();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for entry in &manifest.records {
        let record = &entry.record;
        let preds = predict(&members, record, manifest.availability, cfg.eval.overlap)?;
        let spacing = record.spacing();
        for (w, pred) in preds.iter().enumerate() {
            for (head, name) in pred.heads().iter().zip([
                "p_all_t1",
                "p_all_t2",
                "p_new_t2",
                "p_vanish_t2",
            ]) {
                let vol = Volume3D::from_f64(head, pred.shape, spacing)?;
                let base = format!("{}_w{}_{}", record.subject_id, w, name);
                hetseg_core::io::write_volume(&vol, out_dir.join(format!("{base}.nii")))?;
                if args.masks {
                    let mask = vol.binarize(cfg.eval.threshold);
                    hetseg_core::io::write_volume(
                        &mask,
                        out_dir.join(format!("{base}_mask.nii")),
                    )?;
                }
            }
        }
        println!("{}: {} window(s)", record.subject_id, preds.len());
    }
    Ok(ExitCode::SUCCESS)
}

// --------------------------------------------------------------- gradcheck

fn cmd_gradcheck(args: &GradcheckArgs) -> hetseg_core::Result<ExitCode> {
    let cfg = GradCheckConfig {
        seeds: args.seeds,
        tolerance: args.tolerance,
        ..Default::default()
    };
    let reports = run_gradcheck(&cfg, &args.loss)?;
    if reports.is_empty() {
        return Err(Error::Config(format!(
            "no losses matched {:?}; expected dice, long, vol, spat",
            args.loss
        )));
    }
    let mut all_passed = true;
    for report in &reports {
        println!("{report}");
        all_passed &= report.passed();
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numerical {
            component: "gradcheck".to_string(),
            reason: "analytic gradients disagree with finite differences".to_string(),
        })
    }
}

// ------------------------------------------------------------------ report

fn cmd_report(args: &ReportArgs, out_dir: &Path) -> hetseg_core::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.report).map_err(|e| Error::io(&args.report, e))?;
    let report = EvaluationReport::from_json(&text)?;
    print!("{}", report.render_table());

    // Bar chart of ensemble Dice means per dataset/task.
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for row in &report.rows {
        if row.model == "ensemble" && row.metric == "dice" {
            if let Some(mean) = row.mean {
                labels.push(format!("{}:{}", row.dataset, row.task));
                values.push(mean);
            }
        }
    }
    if !values.is_empty() {
        let svg = bar_chart_svg(&labels, &values, "ensemble dice by dataset and task");
        let path = out_dir.join("dice_summary.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        println!("chart written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
