//! Experiment orchestration: repeated seeded runs per dataset, one shared
//! classifier per run feeding every detector, metric aggregation,
//! significance tables, and report files.
//!
//! Determinism contract: every number in every emitted report file is a
//! pure function of the configuration. Run seeds derive as
//! `base_seed * 10000 + run_index`; sub-seeds use fixed offsets from the
//! run seed (split +1, classifier +2, detector GP +3, OOD synthesis +4,
//! adversarial synthesis +5, the two regression baselines +6/+7, the
//! direct GP +8). Wall-clock timings go to a separate file that is
//! excluded from the manifest digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    self, blr_residual_detector, confidnet_detector, dngo_detector, direct_gp_detector,
    introspection_detector, trust_score, TrustScoreConfig,
};
use crate::classifier::{predict, train_mlp, ClassifierOutput, MlpConfig};
use crate::data::{
    load_dataset, make_split, synth_adversarial, synth_ood, CsvSchema, LabeledDataset,
    StandardizationStats,
};
use crate::error::RedError;
use crate::gp::DEFAULT_EXACT_LIMIT;
use crate::metrics::{evaluate_detector, Metric, MetricRecord, RowKind, METRIC_NAMES};
use crate::optimizer::{FitMode, RestartSchedule};
use crate::plot::{write_scatter_svg, ScatterPoint};
use crate::red::{build_targets, fit_red, Aggregation, RedFitInputs, SelectionMode};
use crate::stats::{mean_rank, win_tie_loss, MeanRankRow, PairedSample, WinTieLoss};
use crate::Result;

/// The detectors the harness can run. `red` and `red-variance` share one
/// fitted model per run; the variance detector reports the negated score
/// variance so that, like every other detector, higher means more likely
/// correct / in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    Red,
    RedVariance,
    Mcp,
    Entropy,
    TrustScore,
    Confidnet,
    IntrospectionNet,
    Dngo,
    DirectGp,
    BlrResidual,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Red => "red",
            DetectorKind::RedVariance => "red-variance",
            DetectorKind::Mcp => "mcp",
            DetectorKind::Entropy => "entropy",
            DetectorKind::TrustScore => "trust-score",
            DetectorKind::Confidnet => "confidnet",
            DetectorKind::IntrospectionNet => "introspection-net",
            DetectorKind::Dngo => "dngo",
            DetectorKind::DirectGp => "direct-gp",
            DetectorKind::BlrResidual => "blr-residual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "red" => Ok(DetectorKind::Red),
            "red-variance" => Ok(DetectorKind::RedVariance),
            "mcp" => Ok(DetectorKind::Mcp),
            "entropy" => Ok(DetectorKind::Entropy),
            "trust-score" => Ok(DetectorKind::TrustScore),
            "confidnet" => Ok(DetectorKind::Confidnet),
            "introspection-net" => Ok(DetectorKind::IntrospectionNet),
            "dngo" => Ok(DetectorKind::Dngo),
            "direct-gp" => Ok(DetectorKind::DirectGp),
            "blr-residual" => Ok(DetectorKind::BlrResidual),
            other => Err(RedError::Config(format!("unknown detector '{other}'"))),
        }
    }

    pub fn all() -> Vec<DetectorKind> {
        vec![
            DetectorKind::Red,
            DetectorKind::RedVariance,
            DetectorKind::Mcp,
            DetectorKind::Entropy,
            DetectorKind::TrustScore,
            DetectorKind::Confidnet,
            DetectorKind::IntrospectionNet,
            DetectorKind::Dngo,
            DetectorKind::DirectGp,
            DetectorKind::BlrResidual,
        ]
    }
}

/// Whether standardization statistics are fitted on the training
/// partition only (no test leakage, the default) or globally before
/// splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizationScope {
    TrainOnly,
    Global,
}

fn default_repeats() -> usize {
    10
}
fn default_detectors() -> Vec<DetectorKind> {
    vec![DetectorKind::Red, DetectorKind::Mcp]
}
fn default_mode() -> FitMode {
    FitMode::Exact
}
fn default_scope() -> StandardizationScope {
    StandardizationScope::TrainOnly
}
fn default_aggregation() -> Aggregation {
    Aggregation::EnsembleMean
}

/// Full benchmark configuration; serializable so a run can be launched
/// from a JSON file and echoed into the report manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<PathBuf>,
    #[serde(default = "default_detectors")]
    pub detectors: Vec<DetectorKind>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Restart protocol; its `seed` field is overridden per run.
    #[serde(default)]
    pub schedule: RestartSchedule,
    /// Classifier settings; the `seed` field is overridden per run.
    #[serde(default)]
    pub classifier: MlpConfig,
    #[serde(default = "default_mode")]
    pub mode: FitMode,
    /// Replicates the original selection protocol, which ranks restart
    /// candidates by their test-set AP-Error (test leakage; off by
    /// default).
    #[serde(default)]
    pub paper_selection: bool,
    #[serde(default)]
    pub with_ood: bool,
    #[serde(default)]
    pub with_adversarial: bool,
    #[serde(default = "default_scope")]
    pub standardization: StandardizationScope,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    /// Where report files go. Accepted from config files but never
    /// echoed back into reports: the same experiment written to two
    /// places must produce byte-identical files.
    #[serde(skip_serializing, default)]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(datasets: Vec<PathBuf>, out_dir: PathBuf) -> Self {
        Self {
            datasets,
            detectors: default_detectors(),
            repeats: default_repeats(),
            base_seed: 0,
            schedule: RestartSchedule::default(),
            classifier: MlpConfig::default(),
            mode: default_mode(),
            paper_selection: false,
            with_ood: false,
            with_adversarial: false,
            standardization: default_scope(),
            aggregation: default_aggregation(),
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(RedError::Config("no datasets configured".into()));
        }
        if self.detectors.is_empty() {
            return Err(RedError::Config("no detectors configured".into()));
        }
        if self.repeats == 0 {
            return Err(RedError::Config("repeats must be >= 1".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(RedError::Config("output directory not set".into()));
        }
        for path in &self.datasets {
            if !path.exists() {
                return Err(RedError::Config(format!(
                    "dataset path does not exist: {}",
                    path.display()
                )));
            }
        }
        self.schedule.validate()
    }

    /// Detector list with duplicates removed, order preserved.
    pub fn detector_order(&self) -> Vec<DetectorKind> {
        let mut seen = Vec::new();
        for &d in &self.detectors {
            if !seen.contains(&d) {
                seen.push(d);
            }
        }
        seen
    }
}

/// One dataset/run result: metric records per detector plus the context
/// needed for NA accounting and reproducibility checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub run_index: usize,
    pub run_seed: u64,
    pub split_digest: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub classifier_test_accuracy: f64,
    pub classifier_trainval_accuracy: f64,
    /// Misclassified rows in the detector's training set (train+val).
    pub misclassified_trainval: usize,
    pub detectors: BTreeMap<String, MetricRecord>,
    /// Detector-level failures (for example a class missing for the trust
    /// score, or a perfectly accurate classifier for the residual GP).
    pub detector_failures: BTreeMap<String, String>,
    pub notes: Vec<String>,
    /// Per-evaluation-point (variance, mean, kind) triples from the
    /// residual detector, kept on the first run for the scatter plot.
    pub scatter: Option<Vec<(f64, f64, RowKind)>>,
}

fn subset_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted
        .iter()
        .zip(labels.iter())
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Evaluation rows: the test partition plus optional OOD and adversarial
/// blocks, with per-row classifier-visible quantities.
struct EvalSet {
    x: DMatrix<f64>,
    softmax: DMatrix<f64>,
    max_prob: Vec<f64>,
    predicted: Vec<usize>,
    /// Per-row logits; fabricated adversarial outputs have none.
    logits: Vec<Option<Vec<f64>>>,
    kinds: Vec<RowKind>,
}

impl EvalSet {
    fn len(&self) -> usize {
        self.kinds.len()
    }

    fn push_block(&mut self, x: &DMatrix<f64>, outputs: &ClassifierOutput, kinds: Vec<RowKind>) {
        let offset = self.x.nrows();
        let total = offset + x.nrows();
        let mut new_x = DMatrix::zeros(total, self.x.ncols());
        new_x.view_mut((0, 0), (offset, self.x.ncols())).copy_from(&self.x);
        new_x
            .view_mut((offset, 0), (x.nrows(), x.ncols()))
            .copy_from(x);
        self.x = new_x;

        let mut new_s = DMatrix::zeros(total, self.softmax.ncols());
        new_s
            .view_mut((0, 0), (offset, self.softmax.ncols()))
            .copy_from(&self.softmax);
        new_s
            .view_mut((offset, 0), (outputs.softmax.nrows(), outputs.softmax.ncols()))
            .copy_from(&outputs.softmax);
        self.softmax = new_s;

        self.max_prob.extend_from_slice(&outputs.max_prob);
        self.predicted.extend_from_slice(&outputs.predicted);
        for i in 0..outputs.len() {
            self.logits.push(
                outputs
                    .logits
                    .as_ref()
                    .map(|l| l.row(i).iter().copied().collect()),
            );
        }
        self.kinds.extend(kinds);
    }

    fn row_x(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    fn row_s(&self, i: usize) -> Vec<f64> {
        self.softmax.row(i).iter().copied().collect()
    }

    /// Row indices with logits, and the stacked logit matrix for them.
    fn logit_rows(&self) -> (Vec<usize>, DMatrix<f64>) {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.logits[i].is_some()).collect();
        let k = self.softmax.ncols();
        let m = DMatrix::from_fn(rows.len(), k, |i, j| {
            self.logits[rows[i]].as_ref().unwrap()[j]
        });
        (rows, m)
    }
}

/// Runs one seeded experiment on one dataset: split, classifier, every
/// requested detector, full metric suite.
pub fn run_single(
    ds: &LabeledDataset,
    dataset_name: &str,
    run_index: usize,
    run_seed: u64,
    cfg: &ExperimentConfig,
) -> Result<RunRecord> {
    Ok(run_single_scored(ds, dataset_name, run_index, run_seed, cfg)?.0)
}

/// Like [`run_single`] but also returns the per-detector correctness-
/// oriented scores over the evaluation rows (`None` where a detector
/// cannot score a row). Under the reproduction selection protocol the
/// residual detectors report per-metric ensembles rather than one score
/// vector, so their entries are absent there.
#[allow(clippy::type_complexity)]
pub fn run_single_scored(
    ds: &LabeledDataset,
    dataset_name: &str,
    run_index: usize,
    run_seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(RunRecord, BTreeMap<String, Vec<Option<f64>>>)> {
    let split_seed = run_seed + 1;
    let mlp_seed = run_seed + 2;
    let gp_seed = run_seed + 3;
    let ood_seed = run_seed + 4;
    let adv_seed = run_seed + 5;
    let confidnet_seed = run_seed + 6;
    let introspection_seed = run_seed + 7;
    let direct_gp_seed = run_seed + 8;

    let split = make_split(ds.n(), split_seed)?;
    let stats = match cfg.standardization {
        StandardizationScope::TrainOnly => {
            StandardizationStats::fit(&subset_rows(&ds.features, &split.train_indices))
        }
        StandardizationScope::Global => StandardizationStats::fit(&ds.features),
    };
    let features_std = stats.apply(&ds.features);

    let pick = |rows: &[usize]| LabeledDataset {
        features: subset_rows(&features_std, rows),
        labels: rows.iter().map(|&i| ds.labels[i]).collect(),
        num_classes: ds.num_classes,
    };
    let train_ds = pick(&split.train_indices);
    let val_ds = pick(&split.val_indices);
    let test_ds = pick(&split.test_indices);

    let mut mlp_cfg = cfg.classifier.clone();
    mlp_cfg.seed = mlp_seed;
    let model = train_mlp(&train_ds, &val_ds, &mlp_cfg)?;

    let trainval_indices = split.train_val_indices();
    let trainval_ds = pick(&trainval_indices);
    let val_mask: Vec<bool> = trainval_indices
        .iter()
        .map(|i| split.val_indices.contains(i))
        .collect();

    let outputs_tv = predict(&model, &trainval_ds.features)?;
    let outputs_test = predict(&model, &test_ds.features)?;
    let classifier_trainval_accuracy = accuracy(&outputs_tv.predicted, &trainval_ds.labels);
    let classifier_test_accuracy = accuracy(&outputs_test.predicted, &test_ds.labels);
    let targets_tv = build_targets(&trainval_ds.labels, &outputs_tv)?;

    let mut notes = Vec::new();

    // evaluation rows: test block, then optional OOD / adversarial blocks
    let mut eval = EvalSet {
        x: DMatrix::zeros(0, ds.m()),
        softmax: DMatrix::zeros(0, ds.num_classes),
        max_prob: Vec::new(),
        predicted: Vec::new(),
        logits: Vec::new(),
        kinds: Vec::new(),
    };
    let test_kinds: Vec<RowKind> = test_ds
        .labels
        .iter()
        .zip(outputs_test.predicted.iter())
        .map(|(y, y_hat)| RowKind::InDist { correct: y == y_hat })
        .collect();
    eval.push_block(&test_ds.features, &outputs_test, test_kinds);

    if cfg.with_ood {
        let batch = synth_ood(test_ds.n(), ds.m(), ood_seed);
        let outputs_ood = predict(&model, &batch.features)?;
        let kinds = vec![RowKind::Ood; batch.features.nrows()];
        eval.push_block(&batch.features, &outputs_ood, kinds);
    }
    if cfg.with_adversarial {
        match synth_adversarial(&trainval_ds, &outputs_tv, test_ds.n(), adv_seed) {
            Ok(batch) => {
                let fabricated = batch.fabricated_outputs.as_ref().expect("adversarial batch");
                let kinds = vec![RowKind::Adversarial; batch.features.nrows()];
                eval.push_block(&batch.features, fabricated, kinds);
            }
            Err(e) => notes.push(format!("adversarial block skipped: {e}")),
        }
    }

    let mut detector_scores: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    let mut detector_failures: BTreeMap<String, String> = BTreeMap::new();
    let mut scatter: Option<Vec<(f64, f64, RowKind)>> = None;

    let detectors = cfg.detector_order();
    let wants_red = detectors
        .iter()
        .any(|d| matches!(d, DetectorKind::Red | DetectorKind::RedVariance));

    let mut paper_metrics: BTreeMap<String, MetricRecord> = BTreeMap::new();
    if wants_red {
        let mut schedule = cfg.schedule.clone();
        schedule.seed = gp_seed;
        let inputs = RedFitInputs {
            features: &trainval_ds.features,
            outputs: &outputs_tv,
            labels: &trainval_ds.labels,
            classifier_fingerprint: model.fingerprint(),
        };
        if cfg.paper_selection {
            // reproduction protocol: every metric reports the average of
            // the 3 candidates that do best on that metric on the test
            // side (the original evaluation's per-metric selection, which
            // leaks test information by construction)
            if targets_tv.misclassified_count == 0 {
                let reason = RedError::NoMisclassifications.to_string();
                detector_failures.insert("red".into(), reason.clone());
                detector_failures.insert("red-variance".into(), reason);
            } else {
                let (candidates, _report) = crate::optimizer::multi_restart_fit(
                    &trainval_ds.features,
                    &outputs_tv.softmax,
                    &targets_tv.residuals,
                    &schedule,
                    true,
                    cfg.mode,
                )?;
                let mut mean_records = Vec::with_capacity(candidates.len());
                let mut var_records = Vec::with_capacity(candidates.len());
                let mut all_means: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
                let mut all_vars: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
                for candidate in &candidates {
                    let mut means = Vec::with_capacity(eval.len());
                    let mut vars = Vec::with_capacity(eval.len());
                    for i in 0..eval.len() {
                        let (rm, rv) = candidate.predict(&eval.row_x(i), &eval.row_s(i))?;
                        means.push(eval.max_prob[i] + rm);
                        vars.push(rv);
                    }
                    let mean_scores: Vec<Option<f64>> = means.iter().map(|&v| Some(v)).collect();
                    let var_scores: Vec<Option<f64>> = vars.iter().map(|&v| Some(-v)).collect();
                    mean_records.push(evaluate_detector(&mean_scores, &eval.kinds));
                    var_records.push(evaluate_detector(&var_scores, &eval.kinds));
                    all_means.push(means);
                    all_vars.push(vars);
                }
                paper_metrics.insert("red".into(), top_k_metric_average(&mean_records, 3));
                paper_metrics
                    .insert("red-variance".into(), top_k_metric_average(&var_records, 3));

                // scatter from the 3 candidates best at error detection
                let mut order: Vec<usize> = (0..candidates.len()).collect();
                order.sort_by(|&a, &b| {
                    let va = mean_records[a].ap_error.value().unwrap_or(f64::NEG_INFINITY);
                    let vb = mean_records[b].ap_error.value().unwrap_or(f64::NEG_INFINITY);
                    vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
                });
                let chosen = &order[..3.min(order.len())];
                let points: Vec<(f64, f64, RowKind)> = (0..eval.len())
                    .map(|i| {
                        let mean = chosen.iter().map(|&c| all_means[c][i]).sum::<f64>()
                            / chosen.len() as f64;
                        let var = chosen.iter().map(|&c| all_vars[c][i]).sum::<f64>()
                            / chosen.len() as f64;
                        (var, mean, eval.kinds[i])
                    })
                    .collect();
                scatter = Some(points);
            }
        } else {
            match fit_red(
                &inputs,
                &schedule,
                cfg.mode,
                SelectionMode::LooApError,
                cfg.aggregation,
            ) {
                Ok(red_model) => {
                    let mut means = Vec::with_capacity(eval.len());
                    let mut neg_vars = Vec::with_capacity(eval.len());
                    let mut points = Vec::with_capacity(eval.len());
                    for i in 0..eval.len() {
                        let score =
                            red_model.score(&eval.row_x(i), &eval.row_s(i), eval.max_prob[i])?;
                        means.push(Some(score.mean));
                        neg_vars.push(Some(-score.variance));
                        points.push((score.variance, score.mean, eval.kinds[i]));
                    }
                    detector_scores.insert("red".into(), means);
                    detector_scores.insert("red-variance".into(), neg_vars);
                    scatter = Some(points);
                }
                Err(e @ RedError::NoMisclassifications) => {
                    let reason = e.to_string();
                    detector_failures.insert("red".into(), reason.clone());
                    detector_failures.insert("red-variance".into(), reason);
                }
                Err(e) => return Err(e),
            }
        }
    }

    for detector in &detectors {
        match detector {
            DetectorKind::Red | DetectorKind::RedVariance => {} // handled above
            DetectorKind::Mcp => {
                detector_scores.insert(
                    "mcp".into(),
                    eval.max_prob.iter().map(|&v| Some(v)).collect(),
                );
            }
            DetectorKind::Entropy => {
                let scores = (0..eval.len())
                    .map(|i| Some(-baselines::softmax_entropy(&eval.row_s(i))))
                    .collect();
                detector_scores.insert("entropy".into(), scores);
            }
            DetectorKind::TrustScore => {
                match trust_score(
                    &trainval_ds.features,
                    &trainval_ds.labels,
                    ds.num_classes,
                    &eval.x,
                    &eval.predicted,
                    &TrustScoreConfig::default(),
                ) {
                    Ok(det) => {
                        detector_scores
                            .insert("trust-score".into(), det.scores.into_iter().map(Some).collect());
                    }
                    Err(e @ RedError::ClassMissing { .. }) => {
                        detector_failures.insert("trust-score".into(), e.to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
            DetectorKind::Confidnet => {
                let train_rows: Vec<usize> = (0..trainval_ds.n()).filter(|&i| !val_mask[i]).collect();
                let val_rows: Vec<usize> = (0..trainval_ds.n()).filter(|&i| val_mask[i]).collect();
                let true_prob = |i: usize| outputs_tv.softmax[(i, trainval_ds.labels[i])];
                let train_y = DVector::from_fn(train_rows.len(), |r, _| true_prob(train_rows[r]));
                let val_y = DVector::from_fn(val_rows.len(), |r, _| true_prob(val_rows[r]));
                let det = confidnet_detector(
                    &subset_rows(&trainval_ds.features, &train_rows),
                    &train_y,
                    &subset_rows(&trainval_ds.features, &val_rows),
                    &val_y,
                    &eval.x,
                    confidnet_seed,
                )?;
                detector_scores
                    .insert("confidnet".into(), det.scores.into_iter().map(Some).collect());
            }
            DetectorKind::IntrospectionNet => {
                let logits_tv = outputs_tv.logits.as_ref().expect("mlp outputs carry logits");
                let train_rows: Vec<usize> = (0..trainval_ds.n()).filter(|&i| !val_mask[i]).collect();
                let val_rows: Vec<usize> = (0..trainval_ds.n()).filter(|&i| val_mask[i]).collect();
                let train_correct: Vec<bool> =
                    train_rows.iter().map(|&i| targets_tv.correctness[i]).collect();
                let val_correct: Vec<bool> =
                    val_rows.iter().map(|&i| targets_tv.correctness[i]).collect();
                let (eval_rows, eval_logits) = eval.logit_rows();
                let det = introspection_detector(
                    &subset_rows(logits_tv, &train_rows),
                    &train_correct,
                    &subset_rows(logits_tv, &val_rows),
                    &val_correct,
                    &eval_logits,
                    introspection_seed,
                )?;
                let mut scores = vec![None; eval.len()];
                for (slot, &row) in eval_rows.iter().enumerate() {
                    scores[row] = Some(det.scores[slot]);
                }
                detector_scores.insert("introspection-net".into(), scores);
            }
            DetectorKind::Dngo => {
                let logits_tv = outputs_tv.logits.as_ref().expect("mlp outputs carry logits");
                let (eval_rows, eval_logits) = eval.logit_rows();
                match dngo_detector(logits_tv, &targets_tv.correctness, &eval_logits) {
                    Ok(det) => {
                        let mut scores = vec![None; eval.len()];
                        for (slot, &row) in eval_rows.iter().enumerate() {
                            scores[row] = Some(det.scores[slot]);
                        }
                        detector_scores.insert("dngo".into(), scores);
                    }
                    Err(e @ RedError::Numerical(_)) => {
                        detector_failures.insert("dngo".into(), e.to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
            DetectorKind::DirectGp => {
                let mut schedule = cfg.schedule.clone();
                schedule.seed = direct_gp_seed;
                let det = direct_gp_detector(
                    &trainval_ds.features,
                    &outputs_tv.softmax,
                    &targets_tv.correctness,
                    &eval.x,
                    &eval.softmax,
                    &schedule,
                    cfg.mode,
                )?;
                detector_scores
                    .insert("direct-gp".into(), det.scores.into_iter().map(Some).collect());
            }
            DetectorKind::BlrResidual => {
                match blr_residual_detector(
                    &trainval_ds.features,
                    &outputs_tv.softmax,
                    &targets_tv.residuals,
                    &eval.x,
                    &eval.softmax,
                    &eval.max_prob,
                ) {
                    Ok(det) => {
                        detector_scores
                            .insert("blr-residual".into(), det.scores.into_iter().map(Some).collect());
                    }
                    Err(e @ RedError::Numerical(_)) => {
                        detector_failures.insert("blr-residual".into(), e.to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }

    let mut detector_metrics = BTreeMap::new();
    for detector in &detectors {
        let name = detector.name().to_string();
        if let Some(record) = paper_metrics.remove(&name) {
            detector_metrics.insert(name, record);
        } else if let Some(scores) = detector_scores.get(&name) {
            detector_metrics.insert(name, evaluate_detector(scores, &eval.kinds));
        } else if let Some(reason) = detector_failures.get(&name) {
            detector_metrics.insert(name, MetricRecord::all_na(reason));
        }
    }

    let split_digest = sha256_hex(&serde_json::to_vec(&split)?);
    let record = RunRecord {
        dataset: dataset_name.to_string(),
        run_index,
        run_seed,
        split_digest,
        n_rows: ds.n(),
        n_features: ds.m(),
        n_classes: ds.num_classes,
        classifier_test_accuracy,
        classifier_trainval_accuracy,
        misclassified_trainval: targets_tv.misclassified_count,
        detectors: detector_metrics,
        detector_failures,
        notes,
        scatter: if run_index == 0 { scatter } else { None },
    };
    Ok((record, detector_scores))
}

/// "Average performance of the best k models" per metric: each metric
/// slot averages the k highest candidate values of that metric, skipping
/// candidates where it is NA.
fn top_k_metric_average(records: &[MetricRecord], k: usize) -> MetricRecord {
    let pick = |metric: &str| -> Metric {
        let mut values: Vec<f64> = records
            .iter()
            .filter_map(|r| r.get(metric).value())
            .collect();
        if values.is_empty() {
            return Metric::Na {
                na: records
                    .first()
                    .and_then(|r| r.get(metric).na_reason())
                    .unwrap_or("no candidate produced this metric")
                    .to_string(),
            };
        }
        values.sort_by(|a, b| b.partial_cmp(a).unwrap());
        values.truncate(k.min(values.len()));
        Metric::Value(values.iter().sum::<f64>() / values.len() as f64)
    };
    MetricRecord {
        ap_error: pick("ap_error"),
        aupr_error: pick("aupr_error"),
        ap_success: pick("ap_success"),
        aupr_success: pick("aupr_success"),
        auroc: pick("auroc"),
        ap_ood: pick("ap_ood"),
        aupr_ood: pick("aupr_ood"),
        ap_adversarial: pick("ap_adversarial"),
        aupr_adversarial: pick("aupr_adversarial"),
    }
}

/// Everything a benchmark produces before files are written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkOutcome {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
}

/// Runs `repeats` seeded runs for every dataset. Runs execute in
/// parallel; records are merged in (dataset, run) order so results do not
/// depend on scheduling.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    if matches!(cfg.mode, FitMode::Exact) {
        for path in &cfg.datasets {
            let ds = load_dataset(path, &CsvSchema::default())?;
            if ds.n() > DEFAULT_EXACT_LIMIT {
                return Err(RedError::Config(format!(
                    "{} has {} rows, above the exact-mode limit {DEFAULT_EXACT_LIMIT}; use sparse mode",
                    path.display(),
                    ds.n()
                )));
            }
        }
    }
    let mut records = Vec::new();
    for path in &cfg.datasets {
        let ds = load_dataset(path, &CsvSchema::default())?;
        let name = dataset_name(path);
        let run_results: Vec<Result<RunRecord>> = (0..cfg.repeats)
            .into_par_iter()
            .map(|run| {
                let run_seed = cfg.base_seed * 10_000 + run as u64;
                run_single(&ds, &name, run, run_seed, cfg)
            })
            .collect();
        for result in run_results {
            records.push(result?);
        }
    }
    Ok(BenchmarkOutcome {
        config: cfg.clone(),
        records,
    })
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string())
}

/// Mean over runs of one detector/metric on one dataset, NA runs skipped.
fn run_average(records: &[&RunRecord], detector: &str, metric: &str) -> Option<(f64, f64, usize)> {
    let values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.detectors.get(detector))
        .filter_map(|m| m.get(metric).value())
        .collect();
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std, values.len()))
}

/// Writes the full report: per-run CSV, per-dataset summary, mean-rank
/// and win/tie/loss tables, scatter plots, records, and a manifest with
/// file digests. Returns the emitted paths. All files are byte-identical
/// across reruns of the same configuration.
pub fn emit_report(outcome: &BenchmarkOutcome, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &outcome.config;
    let detectors: Vec<String> = cfg
        .detector_order()
        .iter()
        .map(|d| d.name().to_string())
        .collect();
    let dataset_names: Vec<String> = cfg.datasets.iter().map(|p| dataset_name(p)).collect();
    let mut files = Vec::new();

    // per-run long-format table
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "run", "detector", "metric", "value", "na_reason"])?;
        for record in &outcome.records {
            for detector in &detectors {
                let Some(metrics) = record.detectors.get(detector) else {
                    continue;
                };
                for metric in METRIC_NAMES {
                    let cell = metrics.get(metric);
                    w.write_record([
                        record.dataset.as_str(),
                        &record.run_index.to_string(),
                        detector,
                        metric,
                        &cell.csv_cell(),
                        cell.na_reason().unwrap_or(""),
                    ])?;
                }
            }
        }
        files.push(write_file(out_dir, "runs.csv", &w.into_inner().unwrap())?);
    }

    // per-dataset run-averaged summary
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "detector", "metric", "mean", "std", "runs_used"])?;
        for dataset in &dataset_names {
            let records: Vec<&RunRecord> = outcome
                .records
                .iter()
                .filter(|r| &r.dataset == dataset)
                .collect();
            for detector in &detectors {
                for metric in METRIC_NAMES {
                    match run_average(&records, detector, metric) {
                        Some((mean, std, n)) => w.write_record([
                            dataset.as_str(),
                            detector,
                            metric,
                            &mean.to_string(),
                            &std.to_string(),
                            &n.to_string(),
                        ])?,
                        None => w.write_record([
                            dataset.as_str(),
                            detector,
                            metric,
                            "NA",
                            "NA",
                            "0",
                        ])?,
                    }
                }
            }
        }
        files.push(write_file(out_dir, "summary.csv", &w.into_inner().unwrap())?);
    }

    // mean ranks per metric across detectors
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "detector", "mean_rank", "std_rank", "datasets_used"])?;
        if detectors.len() >= 2 {
            for metric in METRIC_NAMES {
                let table: Vec<Vec<Option<f64>>> = dataset_names
                    .iter()
                    .map(|dataset| {
                        let records: Vec<&RunRecord> = outcome
                            .records
                            .iter()
                            .filter(|r| &r.dataset == dataset)
                            .collect();
                        detectors
                            .iter()
                            .map(|d| run_average(&records, d, metric).map(|(m, _, _)| m))
                            .collect()
                    })
                    .collect();
                if let Ok(rows) = mean_rank(&detectors, &table) {
                    for row in rows {
                        write_mean_rank_row(&mut w, metric, &row)?;
                    }
                }
            }
        }
        files.push(write_file(out_dir, "mean_rank.csv", &w.into_inner().unwrap())?);
    }

    // win/tie/loss of the first detector against each other detector
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "metric",
            "reference",
            "opponent",
            "wins",
            "ties",
            "losses",
            "datasets_compared",
        ])?;
        if let Some(reference) = detectors.first() {
            for opponent in detectors.iter().skip(1) {
                for metric in METRIC_NAMES {
                    let mut samples = Vec::new();
                    for dataset in &dataset_names {
                        let mut a = Vec::new();
                        let mut b = Vec::new();
                        for record in outcome.records.iter().filter(|r| &r.dataset == dataset) {
                            let va = record
                                .detectors
                                .get(reference)
                                .and_then(|m| m.get(metric).value());
                            let vb = record
                                .detectors
                                .get(opponent)
                                .and_then(|m| m.get(metric).value());
                            if let (Some(va), Some(vb)) = (va, vb) {
                                a.push(va);
                                b.push(vb);
                            }
                        }
                        if a.len() >= 2 {
                            samples.push(PairedSample::new(a, b)?);
                        }
                    }
                    let wtl: WinTieLoss = win_tie_loss(&samples, 0.05);
                    w.write_record([
                        metric,
                        reference.as_str(),
                        opponent.as_str(),
                        &wtl.wins.to_string(),
                        &wtl.ties.to_string(),
                        &wtl.losses.to_string(),
                        &samples.len().to_string(),
                    ])?;
                }
            }
        }
        files.push(write_file(out_dir, "win_tie_loss.csv", &w.into_inner().unwrap())?);
    }

    // scatter plots from the first run of each dataset
    for record in &outcome.records {
        if let Some(points) = &record.scatter {
            let scatter: Vec<ScatterPoint> = points
                .iter()
                .map(|&(variance, mean, kind)| ScatterPoint {
                    variance,
                    mean,
                    kind,
                })
                .collect();
            let file = out_dir.join(format!("scatter_{}.svg", record.dataset));
            write_scatter_svg(&file, &format!("{} detection scores", record.dataset), &scatter)?;
            files.push(file);
        }
    }

    // full records for re-rendering
    files.push(write_file(
        out_dir,
        "records.json",
        serde_json::to_string_pretty(outcome)?.as_bytes(),
    )?);

    // manifest with config echo and per-file digests
    {
        let mut digests = BTreeMap::new();
        for file in &files {
            let bytes = std::fs::read(file)?;
            digests.insert(
                file.file_name().unwrap().to_string_lossy().to_string(),
                sha256_hex(&bytes),
            );
        }
        let mut na_accounting = Vec::new();
        for record in &outcome.records {
            for (detector, metrics) in &record.detectors {
                for metric in METRIC_NAMES {
                    if let Some(reason) = metrics.get(metric).na_reason() {
                        na_accounting.push(serde_json::json!({
                            "dataset": record.dataset,
                            "run": record.run_index,
                            "detector": detector,
                            "metric": metric,
                            "reason": reason,
                        }));
                    }
                }
            }
        }
        let manifest = serde_json::json!({
            "config": cfg,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "seed_derivation": "run_seed = base_seed * 10000 + run_index; sub-seeds at fixed offsets +1..+8",
            "run_seeds": outcome.records.iter().map(|r| r.run_seed).collect::<Vec<_>>(),
            "files": digests,
            "na_accounting": na_accounting,
        });
        files.push(write_file(
            out_dir,
            "manifest.json",
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?);
    }

    Ok(files)
}

fn write_mean_rank_row(
    w: &mut csv::Writer<Vec<u8>>,
    metric: &str,
    row: &MeanRankRow,
) -> Result<()> {
    w.write_record([
        metric,
        row.method.as_str(),
        &row.mean_rank.to_string(),
        &row.std_rank.to_string(),
        &row.datasets_used.to_string(),
    ])?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, bytes)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CsvSchema;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    /// A 4-class overlapping-blobs CSV, small enough for fast runs but
    /// noisy enough that the classifier always errs somewhere.
    fn blobs_csv(dir: &Path, name: &str, n_per_class: usize, spread: f64) -> PathBuf {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "f0,f1,label").unwrap();
        let centers = [(0.0, 0.0), (1.6, 0.0), (0.0, 1.6), (1.6, 1.6)];
        for (label, (cx, cy)) in centers.iter().enumerate() {
            for _ in 0..n_per_class {
                let x = cx + rng.gen_range(-spread..spread);
                let y = cy + rng.gen_range(-spread..spread);
                writeln!(f, "{x},{y},{label}").unwrap();
            }
        }
        path
    }

    fn quick_config(dir: &Path, data: PathBuf) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(vec![data], dir.join("out"));
        cfg.repeats = 2;
        cfg.schedule = RestartSchedule {
            num_restarts: 4,
            staged_count: 2,
            max_iterations: 120,
            ..RestartSchedule::default()
        };
        cfg.classifier.max_epochs = 150;
        cfg.with_ood = true;
        cfg.with_adversarial = true;
        cfg
    }

    #[test]
    fn single_run_produces_finite_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 25, 1.4);
        let cfg = quick_config(dir.path(), data.clone());
        let ds = load_dataset(&data, &CsvSchema::default()).unwrap();
        let record = run_single(&ds, "blobs", 0, 0, &cfg).unwrap();
        let red = record.detectors.get("red").expect("red metrics present");
        let mcp_rec = record.detectors.get("mcp").expect("mcp metrics present");
        assert!(red.ap_error.value().is_some(), "red AP-Error: {:?}", red.ap_error);
        assert!(mcp_rec.ap_error.value().is_some());
        assert!(red.ap_ood.value().is_some());
        assert!(red.ap_adversarial.value().is_some());
        assert!(record.scatter.is_some());
    }

    #[test]
    fn perfect_classifier_records_na_without_crashing() {
        // classes spaced far apart: the classifier nails everything
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let path = dir.path().join("separated.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "f0,f1,label").unwrap();
        for label in 0..2 {
            for _ in 0..30 {
                let x = label as f64 * 50.0 + rng.gen_range(-0.5..0.5);
                let y = label as f64 * 50.0 + rng.gen_range(-0.5..0.5);
                writeln!(f, "{x},{y},{label}").unwrap();
            }
        }
        drop(f);
        let cfg = quick_config(dir.path(), path.clone());
        let ds = load_dataset(&path, &CsvSchema::default()).unwrap();
        let record = run_single(&ds, "separated", 0, 7, &cfg).unwrap();
        assert_eq!(record.misclassified_trainval, 0);
        assert!(record.detector_failures.contains_key("red"));
        let red = record.detectors.get("red").unwrap();
        assert!(red.ap_error.na_reason().is_some());
        // mcp error metrics are NA too: the test split has no errors either
        let mcp_rec = record.detectors.get("mcp").unwrap();
        assert!(
            mcp_rec.ap_error.na_reason().is_some()
                || record.classifier_test_accuracy < 1.0
        );
    }

    #[test]
    fn rerun_with_same_config_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 20, 1.2);
        let mut cfg = quick_config(dir.path(), data);
        cfg.repeats = 1;
        let a = run_benchmark(&cfg).unwrap();
        let b = run_benchmark(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.records).unwrap(),
            serde_json::to_string(&b.records).unwrap()
        );
    }

    #[test]
    fn report_files_round_trip_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 20, 1.2);
        let mut cfg = quick_config(dir.path(), data);
        cfg.repeats = 2;
        cfg.detectors = vec![DetectorKind::Red, DetectorKind::Mcp, DetectorKind::Entropy];
        let outcome = run_benchmark(&cfg).unwrap();

        let out_a = dir.path().join("report_a");
        let out_b = dir.path().join("report_b");
        let files_a = emit_report(&outcome, &out_a).unwrap();
        emit_report(&outcome, &out_b).unwrap();
        for file in &files_a {
            let name = file.file_name().unwrap();
            let a = std::fs::read(file).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs between reruns");
        }

        // records round-trip through JSON
        let loaded: BenchmarkOutcome = serde_json::from_str(
            &std::fs::read_to_string(out_a.join("records.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(loaded.records.len(), outcome.records.len());

        // runs.csv is parseable and covers both detectors
        let mut reader = csv::Reader::from_path(out_a.join("runs.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert!(rows.iter().any(|r| &r[2] == "red"));
        assert!(rows.iter().any(|r| &r[2] == "mcp"));
    }

    #[test]
    fn adding_a_detector_leaves_other_metrics_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 20, 1.2);
        let mut cfg = quick_config(dir.path(), data);
        cfg.repeats = 1;
        cfg.detectors = vec![DetectorKind::Red, DetectorKind::Mcp];
        let a = run_benchmark(&cfg).unwrap();
        cfg.detectors = vec![DetectorKind::Red, DetectorKind::Mcp, DetectorKind::Entropy];
        let b = run_benchmark(&cfg).unwrap();
        let get = |o: &BenchmarkOutcome, det: &str| {
            serde_json::to_string(o.records[0].detectors.get(det).unwrap()).unwrap()
        };
        assert_eq!(get(&a, "red"), get(&b, "red"));
        assert_eq!(get(&a, "mcp"), get(&b, "mcp"));
    }

    #[test]
    fn sparse_mode_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 25, 1.3);
        let mut cfg = quick_config(dir.path(), data.clone());
        cfg.repeats = 1;
        cfg.mode = FitMode::Sparse { inducing: 20 };
        let ds = load_dataset(&data, &CsvSchema::default()).unwrap();
        let record = run_single(&ds, "blobs", 0, 3, &cfg).unwrap();
        let red = record.detectors.get("red").expect("red metrics");
        assert!(red.ap_error.value().is_some() || red.ap_error.na_reason().is_some());
    }

    #[test]
    fn paper_selection_reports_per_metric_top3() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs_csv(dir.path(), "blobs.csv", 25, 1.4);
        let mut cfg = quick_config(dir.path(), data.clone());
        cfg.repeats = 1;
        cfg.paper_selection = true;
        let ds = load_dataset(&data, &CsvSchema::default()).unwrap();
        let record = run_single(&ds, "blobs", 0, 0, &cfg).unwrap();
        let red = record.detectors.get("red").expect("red metrics");
        assert!(red.ap_error.value().is_some());
        assert!(record.scatter.is_some());
        // deterministic under rerun
        let again = run_single(&ds, "blobs", 0, 0, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&record).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn config_errors_are_flagged() {
        let cfg = ExperimentConfig::new(vec![], PathBuf::from("/tmp/nowhere"));
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let cfg = ExperimentConfig::new(
            vec![PathBuf::from("/nonexistent/data.csv")],
            PathBuf::from("/tmp/nowhere"),
        );
        assert!(cfg.validate().is_err());
    }
}
