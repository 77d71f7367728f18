//! Batch CLI around the detection library.
//!
//! Subcommands mirror the pipeline stages: `train-classifier` produces
//! the shared classifier artifacts, `fit-red` fits the detector on top of
//! them, `score` emits detection scores for new rows, `synth` fabricates
//! OOD/adversarial batches, `evaluate` runs the full detector suite once,
//! `benchmark` runs the repeated protocol over many datasets, and
//! `report` re-renders tables from stored records.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use red_core::classifier::{predict, train_mlp, MlpConfig, MlpModel};
use red_core::data::{
    load_dataset, make_split, save_synthetic, synth_adversarial, synth_ood, CsvSchema,
    LabeledDataset, SplitPlan, StandardizationStats,
};
use red_core::harness::{
    dataset_name, emit_report, run_benchmark, run_single_scored, BenchmarkOutcome, DetectorKind,
    ExperimentConfig,
};
use red_core::metrics::METRIC_NAMES;
use red_core::optimizer::{FitMode, RestartSchedule};
use red_core::red::{fit_red, Aggregation, RedFitInputs, RedModel, SelectionMode};
use red_core::{RedError, Result};

#[derive(Parser)]
#[command(
    name = "red",
    about = "Residual-based error detection for classifiers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base MLP classifier and write the shared run artifacts.
    TrainClassifier(TrainClassifierArgs),
    /// Fit the residual GP detector on stored classifier artifacts.
    FitRed(FitRedArgs),
    /// Score rows with a fitted detector (CSV: id, c_hat, mean, variance).
    Score(ScoreArgs),
    /// Fabricate synthetic test batches.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Run every requested detector once on one dataset and report metrics.
    Evaluate(EvaluateArgs),
    /// Run the repeated benchmark protocol over one or more datasets.
    Benchmark(BenchmarkArgs),
    /// Re-render report tables and plots from stored records.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainClassifierArgs {
    /// Dataset CSV (feature columns then an integer `label` column).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit standardization statistics on all rows instead of the training
    /// partition only.
    #[arg(long)]
    global_standardization: bool,
    #[arg(long, default_value_t = 1000)]
    max_epochs: usize,
}

#[derive(Args)]
struct FitRedArgs {
    /// Dataset CSV the classifier was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Artifact directory written by train-classifier.
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// exact | sparse
    #[arg(long, default_value = "exact")]
    mode: String,
    /// Inducing point count for sparse mode.
    #[arg(long, default_value_t = 50)]
    inducing: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    /// Rank restart candidates by training objective instead of
    /// validation AP-Error.
    #[arg(long)]
    lml_selection: bool,
    /// Deploy only the single best model instead of the top-3 ensemble.
    #[arg(long)]
    single_model: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Artifact directory holding classifier.json and red_model.json.
    #[arg(long)]
    artifacts: PathBuf,
    /// Rows to score: CSV with the training feature columns (a `label`
    /// column, if present, is ignored).
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Standard-normal feature rows in the standardized feature space.
    Ood(SynthOodArgs),
    /// Copies of correctly classified training rows with fabricated
    /// full-confidence wrong-class outputs.
    Adversarial(SynthAdversarialArgs),
}

#[derive(Args)]
struct SynthOodArgs {
    #[arg(long)]
    count: usize,
    /// Feature dimension.
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthAdversarialArgs {
    /// Dataset CSV the classifier was trained on.
    #[arg(long)]
    data: PathBuf,
    /// Artifact directory written by train-classifier.
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated detector list.
    #[arg(long, default_value = "red,red-variance,mcp,entropy")]
    detectors: String,
    #[arg(long)]
    ood: bool,
    #[arg(long)]
    adversarial: bool,
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 50)]
    inducing: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long)]
    paper_selection: bool,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Full experiment configuration as JSON; other flags are ignored
    /// when this is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSVs (repeatable).
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value = "red,mcp")]
    detectors: String,
    #[arg(long)]
    ood: bool,
    #[arg(long)]
    adversarial: bool,
    #[arg(long, default_value = "exact")]
    mode: String,
    #[arg(long, default_value_t = 50)]
    inducing: usize,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    #[arg(long)]
    paper_selection: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// records.json from a previous benchmark.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_mode(mode: &str, inducing: usize) -> Result<FitMode> {
    match mode {
        "exact" => Ok(FitMode::Exact),
        "sparse" => Ok(FitMode::Sparse { inducing }),
        other => Err(RedError::Config(format!(
            "mode must be 'exact' or 'sparse', got '{other}'"
        ))),
    }
}

fn parse_detectors(list: &str) -> Result<Vec<DetectorKind>> {
    list.split(',')
        .map(|s| DetectorKind::parse(s.trim()))
        .collect()
}

/// Artifact file names inside a run directory.
mod artifact {
    pub const CLASSIFIER: &str = "classifier.json";
    pub const SPLIT: &str = "split.json";
    pub const STANDARDIZATION: &str = "standardization.json";
    pub const RED_MODEL: &str = "red_model.json";
    pub const FIT_REPORT: &str = "fit_report.json";
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        RedError::Data(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_train_classifier(args: &TrainClassifierArgs) -> Result<()> {
    let ds = load_dataset(&args.data, &CsvSchema::default())?;
    std::fs::create_dir_all(&args.out)?;
    let split = make_split(ds.n(), args.seed + 1)?;
    let stats = if args.global_standardization {
        StandardizationStats::fit(&ds.features)
    } else {
        let train = ds.subset(&split.train_indices);
        StandardizationStats::fit(&train.features)
    };
    let features_std = stats.apply(&ds.features);
    let pick = |rows: &[usize]| LabeledDataset {
        features: DMatrix::from_fn(rows.len(), ds.m(), |i, j| features_std[(rows[i], j)]),
        labels: rows.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
    };
    let train = pick(&split.train_indices);
    let val = pick(&split.val_indices);
    let test = pick(&split.test_indices);

    let cfg = MlpConfig {
        max_epochs: args.max_epochs,
        seed: args.seed + 2,
        ..MlpConfig::default()
    };
    let model = train_mlp(&train, &val, &cfg)?;
    let test_out = predict(&model, &test.features)?;
    let accuracy = test_out
        .predicted
        .iter()
        .zip(test.labels.iter())
        .filter(|(a, b)| a == b)
        .count() as f64
        / test.n() as f64;

    model.save(&args.out.join(artifact::CLASSIFIER))?;
    write_json(&args.out.join(artifact::SPLIT), &split)?;
    write_json(&args.out.join(artifact::STANDARDIZATION), &stats)?;
    println!(
        "trained classifier: {} epochs best, test accuracy {:.4}",
        model.best_epoch, accuracy
    );
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

fn load_artifacts(dir: &Path) -> Result<(MlpModel, SplitPlan, StandardizationStats)> {
    let model = MlpModel::load(&dir.join(artifact::CLASSIFIER))?;
    let split: SplitPlan = read_json(&dir.join(artifact::SPLIT))?;
    let stats: StandardizationStats = read_json(&dir.join(artifact::STANDARDIZATION))?;
    Ok((model, split, stats))
}

fn cmd_fit_red(args: &FitRedArgs) -> Result<()> {
    let ds = load_dataset(&args.data, &CsvSchema::default())?;
    let (model, split, stats) = load_artifacts(&args.artifacts)?;
    let features_std = stats.apply(&ds.features);
    let trainval = split.train_val_indices();
    let features = DMatrix::from_fn(trainval.len(), ds.m(), |i, j| {
        features_std[(trainval[i], j)]
    });
    let labels: Vec<usize> = trainval.iter().map(|&i| ds.labels[i]).collect();
    let outputs = predict(&model, &features)?;

    let schedule = RestartSchedule {
        num_restarts: args.restarts,
        staged_count: args.restarts / 2,
        seed: args.seed + 3,
        ..RestartSchedule::default()
    };
    let inputs = RedFitInputs {
        features: &features,
        outputs: &outputs,
        labels: &labels,
        classifier_fingerprint: model.fingerprint(),
    };
    let selection = if args.lml_selection {
        SelectionMode::FinalLml
    } else {
        SelectionMode::LooApError
    };
    let aggregation = if args.single_model {
        Aggregation::SingleBest
    } else {
        Aggregation::EnsembleMean
    };
    let red_model = fit_red(
        &inputs,
        &schedule,
        parse_mode(&args.mode, args.inducing)?,
        selection,
        aggregation,
    )?;
    red_model.save(&args.artifacts.join(artifact::RED_MODEL))?;
    write_json(&args.artifacts.join(artifact::FIT_REPORT), &red_model.report)?;
    let converged = red_model
        .report
        .outcomes
        .iter()
        .filter(|o| o.converged)
        .count();
    println!(
        "fitted detector: {}/{} restarts converged, {} ensemble members",
        converged,
        red_model.report.outcomes.len(),
        red_model.members.len()
    );
    Ok(())
}

/// Reads a feature CSV for scoring; a `label` column is dropped if
/// present.
fn load_feature_rows(path: &Path, expected_m: usize) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers.iter().position(|h| h == "label");
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|i| Some(*i) != label_idx)
        .collect();
    if feature_cols.len() != expected_m {
        return Err(RedError::Dimension(format!(
            "{} feature columns in {}, classifier expects {expected_m}",
            feature_cols.len(),
            path.display()
        )));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        for (slot, &idx) in feature_cols.iter().enumerate() {
            let cell = record.get(idx).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| RedError::Parse {
                row: row_no,
                column: headers.get(idx).unwrap_or(&format!("col{slot}")).to_string(),
                message: format!("'{cell}' is not numeric"),
            })?;
            rows.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(RedError::Data(format!("no rows in {}", path.display())));
    }
    Ok(DMatrix::from_row_slice(n, expected_m, &rows))
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let (model, _, stats) = load_artifacts(&args.artifacts)?;
    let red_model = RedModel::load(&args.artifacts.join(artifact::RED_MODEL))?;
    red_model.verify_fingerprint(&model.fingerprint())?;

    let raw = load_feature_rows(&args.data, model.input_dim)?;
    let features = stats.apply(&raw);
    let outputs = predict(&model, &features)?;

    let mut writer = csv::Writer::from_path(&args.out)?;
    writer.write_record(["id", "c_hat", "mean", "variance"])?;
    for i in 0..features.nrows() {
        let x: Vec<f64> = features.row(i).iter().copied().collect();
        let s: Vec<f64> = outputs.softmax.row(i).iter().copied().collect();
        let score = red_model.score(&x, &s, outputs.max_prob[i])?;
        writer.write_record([
            i.to_string(),
            outputs.max_prob[i].to_string(),
            score.mean.to_string(),
            score.variance.to_string(),
        ])?;
    }
    writer.flush()?;
    println!("scored {} rows into {}", features.nrows(), args.out.display());
    Ok(())
}

fn cmd_synth_ood(args: &SynthOodArgs) -> Result<()> {
    if args.count == 0 {
        return Err(RedError::Config("count must be >= 1".into()));
    }
    let batch = synth_ood(args.count, args.dim, args.seed);
    save_synthetic(&args.out, &batch)?;
    println!("wrote {} ood rows to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_synth_adversarial(args: &SynthAdversarialArgs) -> Result<()> {
    let ds = load_dataset(&args.data, &CsvSchema::default())?;
    let (model, split, stats) = load_artifacts(&args.artifacts)?;
    let features_std = stats.apply(&ds.features);
    let trainval = split.train_val_indices();
    let train = LabeledDataset {
        features: DMatrix::from_fn(trainval.len(), ds.m(), |i, j| features_std[(trainval[i], j)]),
        labels: trainval.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
    };
    let outputs = predict(&model, &train.features)?;
    let batch = synth_adversarial(&train, &outputs, args.count, args.seed)?;
    save_synthetic(&args.out, &batch)?;
    println!(
        "wrote {} adversarial rows to {}",
        args.count,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let ds = load_dataset(&args.data, &CsvSchema::default())?;
    std::fs::create_dir_all(&args.out)?;
    let mut cfg = ExperimentConfig::new(vec![args.data.clone()], args.out.clone());
    cfg.detectors = parse_detectors(&args.detectors)?;
    cfg.repeats = 1;
    cfg.base_seed = args.seed;
    cfg.mode = parse_mode(&args.mode, args.inducing)?;
    cfg.paper_selection = args.paper_selection;
    cfg.with_ood = args.ood;
    cfg.with_adversarial = args.adversarial;
    cfg.schedule.num_restarts = args.restarts;
    cfg.schedule.staged_count = args.restarts / 2;
    cfg.validate()?;

    let name = dataset_name(&args.data);
    let (record, detector_scores) = run_single_scored(&ds, &name, 0, args.seed * 10_000, &cfg)?;

    let mut writer = csv::Writer::from_path(args.out.join("run_metrics.csv"))?;
    writer.write_record(["detector", "metric", "value", "na_reason"])?;
    for (detector, metrics) in &record.detectors {
        for metric in METRIC_NAMES {
            let cell = metrics.get(metric);
            writer.write_record([
                detector.as_str(),
                metric,
                &cell.csv_cell(),
                cell.na_reason().unwrap_or(""),
            ])?;
        }
    }
    writer.flush()?;
    write_json(&args.out.join("run_record.json"), &record)?;

    // one score file per detector over the evaluation rows
    for (detector, scores) in &detector_scores {
        let mut writer =
            csv::Writer::from_path(args.out.join(format!("scores_{detector}.csv")))?;
        writer.write_record(["id", "score", "detector_name"])?;
        for (i, score) in scores.iter().enumerate() {
            writer.write_record([
                i.to_string(),
                score.map(|v| v.to_string()).unwrap_or_else(|| "NA".into()),
                detector.clone(),
            ])?;
        }
        writer.flush()?;
    }
    println!(
        "evaluated {} detectors on {} (classifier test accuracy {:.4})",
        record.detectors.len(),
        name,
        record.classifier_test_accuracy
    );
    println!("metrics written to {}", args.out.display());
    Ok(())
}

fn cmd_benchmark(args: &BenchmarkArgs) -> Result<()> {
    let cfg = if let Some(config_path) = &args.config {
        let mut cfg = read_json::<ExperimentConfig>(config_path)?;
        if let Some(out) = &args.out {
            cfg.out_dir = out.clone();
        }
        cfg
    } else {
        let out = args.out.clone().ok_or_else(|| {
            RedError::Config("either --config or --out is required".into())
        })?;
        if args.data.is_empty() {
            return Err(RedError::Config(
                "at least one --data path is required without --config".into(),
            ));
        }
        let mut cfg = ExperimentConfig::new(args.data.clone(), out);
        cfg.detectors = parse_detectors(&args.detectors)?;
        cfg.repeats = args.repeats;
        cfg.base_seed = args.seed;
        cfg.mode = parse_mode(&args.mode, args.inducing)?;
        cfg.paper_selection = args.paper_selection;
        cfg.with_ood = args.ood;
        cfg.with_adversarial = args.adversarial;
        cfg.schedule.num_restarts = args.restarts;
        cfg.schedule.staged_count = args.restarts / 2;
        cfg
    };
    cfg.validate()?;
    let started = std::time::Instant::now();
    let outcome = run_benchmark(&cfg)?;
    let files = emit_report(&outcome, &cfg.out_dir)?;
    eprintln!(
        "benchmark finished in {:.1}s ({} runs)",
        started.elapsed().as_secs_f64(),
        outcome.records.len()
    );
    println!("report files:");
    for file in files {
        println!("  {}", file.display());
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let outcome: BenchmarkOutcome = read_json(&args.records)?;
    let files = emit_report(&outcome, &args.out)?;
    println!("re-rendered {} files into {}", files.len(), args.out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainClassifier(args) => cmd_train_classifier(args),
        Command::FitRed(args) => cmd_fit_red(args),
        Command::Score(args) => cmd_score(args),
        Command::Synth(SynthCommand::Ood(args)) => cmd_synth_ood(args),
        Command::Synth(SynthCommand::Adversarial(args)) => cmd_synth_adversarial(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
