//! The detector pipeline: correctness targets and residuals, GP fitting
//! through the restart protocol, and detection-score distributions.
//!
//! A fitted model turns a query `(x, softmax, max_prob)` into a Gaussian
//! detection score: mean `max_prob + predicted_residual`, variance the
//! GP's predictive variance. The mean separates correct from incorrect
//! predictions; the variance flags OOD and adversarial queries. Base
//! classifier outputs are never modified.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierOutput;
use crate::error::RedError;
use crate::metrics::{average_precision, PositiveMeaning, RankedEvaluation};
use crate::optimizer::{multi_restart_fit, select_top, FitMode, FitReport, GpCandidate, RestartSchedule};
use crate::Result;

/// Hard 0/1 correctness targets and the residuals the GP regresses on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualTargets {
    /// `true` where the classifier's predicted label equals the true one.
    pub correctness: Vec<bool>,
    /// `c_i - max_prob_i`, each in [-1, 1].
    pub residuals: DVector<f64>,
    pub misclassified_count: usize,
}

/// Builds targets: `c_i = 1` iff the prediction matches the label, and
/// `r_i = c_i - max_prob_i`.
pub fn build_targets(labels: &[usize], outputs: &ClassifierOutput) -> Result<ResidualTargets> {
    if labels.len() != outputs.len() {
        return Err(RedError::Dimension(format!(
            "{} labels vs {} classifier outputs",
            labels.len(),
            outputs.len()
        )));
    }
    let correctness: Vec<bool> = labels
        .iter()
        .zip(outputs.predicted.iter())
        .map(|(y, y_hat)| y == y_hat)
        .collect();
    let residuals = DVector::from_fn(labels.len(), |i, _| {
        (if correctness[i] { 1.0 } else { 0.0 }) - outputs.max_prob[i]
    });
    let misclassified_count = correctness.iter().filter(|&&c| !c).count();
    Ok(ResidualTargets {
        correctness,
        residuals,
        misclassified_count,
    })
}

/// How ensemble members combine at scoring time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Arithmetic mean of member means and member variances.
    EnsembleMean,
    /// Only the best-scored member.
    SingleBest,
}

/// How the top models are picked out of the restart candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Error-detection average precision over the training rows, scored
    /// with leave-one-out predictions (no test leakage). Falls back to
    /// the training objective when the training rows are all-correct or
    /// all-wrong.
    LooApError,
    /// The training objective alone.
    FinalLml,
}

/// Gaussian distribution of the detection score for one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub mean: f64,
    pub variance: f64,
}

/// Everything needed to fit the detector.
pub struct RedFitInputs<'a> {
    /// Standardized feature rows of the combined train+validation set.
    pub features: &'a DMatrix<f64>,
    /// Base classifier outputs on those rows.
    pub outputs: &'a ClassifierOutput,
    /// True labels on those rows.
    pub labels: &'a [usize],
    /// Fingerprint of the base classifier these outputs came from.
    pub classifier_fingerprint: String,
}

/// A fitted detector: up to three GP models plus selection metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RedModel {
    pub members: Vec<GpCandidate>,
    pub member_scores: Vec<f64>,
    pub report: FitReport,
    pub classifier_fingerprint: String,
    pub aggregation: Aggregation,
    /// When set, the observation noise is added to reported variances.
    pub include_noise_in_variance: bool,
}

/// Number of models kept from the restart pool.
pub const ENSEMBLE_SIZE: usize = 3;

/// Fits the detector with the built-in selection modes.
pub fn fit_red(
    inputs: &RedFitInputs,
    schedule: &RestartSchedule,
    mode: FitMode,
    selection: SelectionMode,
    aggregation: Aggregation,
) -> Result<RedModel> {
    let targets = build_targets(inputs.labels, inputs.outputs)?;
    if targets.misclassified_count == 0 {
        return Err(RedError::NoMisclassifications);
    }
    let scorer = |candidates: &[GpCandidate]| -> Vec<f64> {
        match selection {
            SelectionMode::FinalLml => candidates.iter().map(|c| c.selection_lml()).collect(),
            SelectionMode::LooApError => loo_ap_error(candidates, inputs, &targets.correctness)
                .unwrap_or_else(|| candidates.iter().map(|c| c.selection_lml()).collect()),
        }
    };
    fit_red_impl(inputs, &targets, schedule, mode, aggregation, scorer)
}

/// Fits the detector with a caller-provided candidate scorer (used by the
/// leakage-replicating selection mode, which ranks candidates by their
/// test-set performance).
pub fn fit_red_with_scorer<F>(
    inputs: &RedFitInputs,
    schedule: &RestartSchedule,
    mode: FitMode,
    aggregation: Aggregation,
    scorer: F,
) -> Result<RedModel>
where
    F: Fn(&[GpCandidate]) -> Vec<f64>,
{
    let targets = build_targets(inputs.labels, inputs.outputs)?;
    if targets.misclassified_count == 0 {
        return Err(RedError::NoMisclassifications);
    }
    fit_red_impl(inputs, &targets, schedule, mode, aggregation, scorer)
}

fn fit_red_impl<F>(
    inputs: &RedFitInputs,
    targets: &ResidualTargets,
    schedule: &RestartSchedule,
    mode: FitMode,
    aggregation: Aggregation,
    scorer: F,
) -> Result<RedModel>
where
    F: Fn(&[GpCandidate]) -> Vec<f64>,
{
    let (candidates, mut report) = multi_restart_fit(
        inputs.features,
        &inputs.outputs.softmax,
        &targets.residuals,
        schedule,
        true,
        mode,
    )?;
    let scores = scorer(&candidates);
    if scores.len() != candidates.len() {
        return Err(RedError::Dimension(
            "candidate scorer returned wrong length".into(),
        ));
    }
    let lmls: Vec<f64> = candidates.iter().map(|c| c.selection_lml()).collect();
    let k = ENSEMBLE_SIZE.min(candidates.len());
    let selected = select_top(&scores, &lmls, k)?;
    report.selected = selected.clone();

    let mut members = Vec::with_capacity(k);
    let mut member_scores = Vec::with_capacity(k);
    for &idx in &selected {
        members.push(candidates[idx].clone());
        member_scores.push(scores[idx]);
    }
    Ok(RedModel {
        members,
        member_scores,
        report,
        classifier_fingerprint: inputs.classifier_fingerprint.clone(),
        aggregation,
        include_noise_in_variance: false,
    })
}

/// Scores every candidate by AP-Error over the full training set, using
/// leave-one-out predictive means; `None` when the training rows are
/// all-correct or all-wrong, in which case selection falls back to the
/// training objective.
///
/// In-sample predictions interpolate the training targets and would rank
/// every candidate perfectly, so exact candidates are scored leave-one-
/// out. This punishes fits that only look good because each training
/// error carves its own dip: remove the point and the dip is gone.
/// Sparse candidates use their (already non-interpolating) predictions.
fn loo_ap_error(
    candidates: &[GpCandidate],
    inputs: &RedFitInputs,
    correctness: &[bool],
) -> Option<Vec<f64>> {
    let n = correctness.len();
    let errors: Vec<bool> = correctness.iter().map(|&c| !c).collect();
    let n_err = errors.iter().filter(|&&e| e).count();
    if n_err == 0 || n_err == n {
        return None;
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for candidate in candidates {
        let residual_means: Vec<f64> = match candidate {
            GpCandidate::Exact(m) => m.loo_residual_means().iter().copied().collect(),
            GpCandidate::Sparse(m) => {
                let mut means = Vec::with_capacity(n);
                for i in 0..n {
                    let x: Vec<f64> = inputs.features.row(i).iter().copied().collect();
                    let s: Vec<f64> = inputs.outputs.softmax.row(i).iter().copied().collect();
                    means.push(m.predict(&x, &s).ok()?.0);
                }
                means
            }
        };
        // errors are the positive class: negate the correctness scores
        let detection: Vec<f64> = residual_means
            .iter()
            .enumerate()
            .map(|(i, rm)| -(inputs.outputs.max_prob[i] + rm))
            .collect();
        let ev = RankedEvaluation::new(detection, errors.clone(), PositiveMeaning::Error).ok()?;
        scores.push(average_precision(&ev));
    }
    Some(scores)
}

impl RedModel {
    /// Detection-score distribution for one query. The base classifier
    /// outputs are inputs only; nothing is modified or clamped.
    pub fn score(&self, x_star: &[f64], s_star: &[f64], max_prob: f64) -> Result<DetectionScore> {
        let members: &[GpCandidate] = match self.aggregation {
            Aggregation::EnsembleMean => &self.members,
            Aggregation::SingleBest => &self.members[..1],
        };
        let mut mean_sum = 0.0;
        let mut var_sum = 0.0;
        for member in members {
            let (residual_mean, residual_var) = match member {
                GpCandidate::Exact(m) => {
                    m.predict_with(x_star, s_star, self.include_noise_in_variance)?
                }
                GpCandidate::Sparse(m) => {
                    m.predict_with(x_star, s_star, self.include_noise_in_variance)?
                }
            };
            mean_sum += max_prob + residual_mean;
            var_sum += residual_var;
        }
        let n = members.len() as f64;
        Ok(DetectionScore {
            mean: mean_sum / n,
            variance: var_sum / n,
        })
    }

    /// The variance component alone; higher means more OOD/adversarial-
    /// like.
    pub fn variance_score(&self, x_star: &[f64], s_star: &[f64], max_prob: f64) -> Result<f64> {
        Ok(self.score(x_star, s_star, max_prob)?.variance)
    }

    /// Rejects scoring against a classifier other than the one the model
    /// was fitted with.
    pub fn verify_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.classifier_fingerprint != fingerprint {
            return Err(RedError::Data(format!(
                "classifier fingerprint mismatch: model was fitted against {}, got {}",
                self.classifier_fingerprint, fingerprint
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let mut model: RedModel = serde_json::from_str(&json)?;
        for member in &mut model.members {
            member.rebuild()?;
        }
        Ok(model)
    }
}
