//! Threshold-free detection metrics: precision-recall machinery, average
//! precision, trapezoidal AUPR, and AUROC, for error, success, OOD, and
//! adversarial positive-class conventions.
//!
//! Tie handling uses threshold-group semantics: all rows sharing a score
//! cross the threshold together. AP is the step sum over operating
//! points; AUPR is the trapezoidal integral of the same curve, anchored
//! at (recall 0, first-group precision). AUROC is the Mann-Whitney
//! statistic with half credit for ties, computed by exact counting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::RedError;
use crate::Result;

/// What the positive class means for a ranked evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMeaning {
    Error,
    Success,
    Ood,
    Adversarial,
}

/// Scores paired with positive-class flags. Scores are oriented so that
/// higher means more likely positive.
#[derive(Debug, Clone)]
pub struct RankedEvaluation {
    pub scores: Vec<f64>,
    pub positives: Vec<bool>,
    pub positive_meaning: PositiveMeaning,
}

impl RankedEvaluation {
    pub fn new(scores: Vec<f64>, positives: Vec<bool>, meaning: PositiveMeaning) -> Result<Self> {
        if scores.len() != positives.len() {
            return Err(RedError::Dimension(format!(
                "{} scores vs {} flags",
                scores.len(),
                positives.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(RedError::Data(format!("non-finite score {bad}")));
        }
        let pos = positives.iter().filter(|&&p| p).count();
        if pos == 0 || pos == positives.len() {
            return Err(RedError::Data(
                "ranked evaluation needs at least one positive and one negative".into(),
            ));
        }
        Ok(Self {
            scores,
            positives,
            positive_meaning: meaning,
        })
    }

    fn total_positives(&self) -> usize {
        self.positives.iter().filter(|&&p| p).count()
    }
}

/// One operating point of the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Tie-grouped (positive count, negative count) per distinct score,
/// descending.
fn score_groups(ev: &RankedEvaluation) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..ev.scores.len()).collect();
    order.sort_by(|&a, &b| ev.scores[b].partial_cmp(&ev.scores[a]).unwrap());
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let score = ev.scores[order[i]];
        let mut pos = 0;
        let mut neg = 0;
        while i < order.len() && ev.scores[order[i]] == score {
            if ev.positives[order[i]] {
                pos += 1;
            } else {
                neg += 1;
            }
            i += 1;
        }
        groups.push((pos, neg));
    }
    groups
}

/// Precision-recall points swept over distinct score thresholds in
/// descending order, anchored at recall 0 with the first group's
/// precision. The curve always ends at recall 1.
pub fn pr_curve(ev: &RankedEvaluation) -> Vec<PrPoint> {
    let p = ev.total_positives();
    let groups = score_groups(ev);
    let mut points = Vec::with_capacity(groups.len() + 1);
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (g, &(pos, neg)) in groups.iter().enumerate() {
        tp += pos;
        fp += neg;
        let precision = tp as f64 / (tp + fp) as f64;
        if g == 0 {
            points.push(PrPoint {
                recall: 0.0,
                precision,
            });
        }
        points.push(PrPoint {
            recall: tp as f64 / p as f64,
            precision,
        });
        // groups past full recall only lower precision at recall 1 and
        // contribute no area
        if tp == p {
            break;
        }
    }
    points
}

/// Average precision: the step sum `sum_g (R_g - R_{g-1}) * P_g` over the
/// tie-grouped operating points.
pub fn average_precision(ev: &RankedEvaluation) -> f64 {
    let p = ev.total_positives();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for (pos, neg) in score_groups(ev) {
        let delta_tp = pos;
        tp += pos;
        fp += neg;
        ap += (delta_tp as f64 / p as f64) * (tp as f64 / (tp + fp) as f64);
    }
    ap
}

/// Area under the tie-grouped precision-recall curve by trapezoidal
/// integration over recall.
pub fn aupr(ev: &RankedEvaluation) -> f64 {
    let points = pr_curve(ev);
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].recall - w[0].recall) * (w[1].precision + w[0].precision) / 2.0;
    }
    area
}

/// AUROC as the Mann-Whitney statistic: the probability a random positive
/// outranks a random negative, with half credit for ties.
pub fn auroc(ev: &RankedEvaluation) -> f64 {
    let groups = score_groups(ev);
    let p: usize = groups.iter().map(|g| g.0).sum();
    let n: usize = groups.iter().map(|g| g.1).sum();
    // ascending order: negatives strictly below each positive group
    let mut neg_below = 0usize;
    let mut credit = 0.0;
    for &(pos, neg) in groups.iter().rev() {
        credit += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
    }
    credit / (p as f64 * n as f64)
}

/// A metric value or an NA marker with a machine-readable reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Na { na: String },
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Na { .. } => None,
        }
    }

    pub fn na_reason(&self) -> Option<&str> {
        match self {
            Metric::Value(_) => None,
            Metric::Na { na } => Some(na),
        }
    }

    /// Rendering used in CSV cells.
    pub fn csv_cell(&self) -> String {
        match self {
            Metric::Value(v) => v.to_string(),
            Metric::Na { .. } => "NA".to_string(),
        }
    }
}

/// The full metric suite for one detector on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub ap_error: Metric,
    pub aupr_error: Metric,
    pub ap_success: Metric,
    pub aupr_success: Metric,
    pub auroc: Metric,
    pub ap_ood: Metric,
    pub aupr_ood: Metric,
    pub ap_adversarial: Metric,
    pub aupr_adversarial: Metric,
}

/// Canonical metric column order for tables.
pub const METRIC_NAMES: [&str; 9] = [
    "ap_error",
    "aupr_error",
    "ap_success",
    "aupr_success",
    "auroc",
    "ap_ood",
    "aupr_ood",
    "ap_adversarial",
    "aupr_adversarial",
];

impl MetricRecord {
    pub fn get(&self, name: &str) -> &Metric {
        match name {
            "ap_error" => &self.ap_error,
            "aupr_error" => &self.aupr_error,
            "ap_success" => &self.ap_success,
            "aupr_success" => &self.aupr_success,
            "auroc" => &self.auroc,
            "ap_ood" => &self.ap_ood,
            "aupr_ood" => &self.aupr_ood,
            "ap_adversarial" => &self.ap_adversarial,
            "aupr_adversarial" => &self.aupr_adversarial,
            other => panic!("unknown metric {other}"),
        }
    }

    pub fn all_na(reason: &str) -> Self {
        let na = || Metric::Na { na: reason.into() };
        Self {
            ap_error: na(),
            aupr_error: na(),
            ap_success: na(),
            aupr_success: na(),
            auroc: na(),
            ap_ood: na(),
            aupr_ood: na(),
            ap_adversarial: na(),
            aupr_adversarial: na(),
        }
    }

    /// Map of metric name to value for aggregation, skipping NAs.
    pub fn values(&self) -> BTreeMap<&'static str, f64> {
        METRIC_NAMES
            .iter()
            .filter_map(|&n| self.get(n).value().map(|v| (n, v)))
            .collect()
    }
}

/// What kind of row a test point is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// A genuine test row; `correct` says whether the base classifier got
    /// it right.
    InDist { correct: bool },
    Ood,
    Adversarial,
}

/// Computes the full metric suite from correctness-oriented detector
/// scores (higher means more likely correct).
///
/// Error metrics negate scores so that errors rank first; OOD metrics
/// exclude adversarial rows and adversarial metrics exclude OOD rows,
/// both negating scores (low confidence flags anomalies). Degenerate
/// slices produce NA with a reason.
pub fn evaluate_detector(scores: &[Option<f64>], kinds: &[RowKind]) -> MetricRecord {
    assert_eq!(scores.len(), kinds.len(), "scores and kinds must align");

    let build = |keep: &dyn Fn(RowKind) -> bool,
                 positive: &dyn Fn(RowKind) -> bool,
                 negate: bool,
                 meaning: PositiveMeaning|
     -> std::result::Result<RankedEvaluation, String> {
        let mut s = Vec::new();
        let mut pos = Vec::new();
        for (score, &kind) in scores.iter().zip(kinds.iter()) {
            if !keep(kind) {
                continue;
            }
            match score {
                Some(v) => {
                    s.push(if negate { -v } else { *v });
                    pos.push(positive(kind));
                }
                None => {
                    return Err("detector cannot score every row in this slice".to_string());
                }
            }
        }
        if s.is_empty() {
            return Err("no rows in slice".to_string());
        }
        RankedEvaluation::new(s, pos, meaning).map_err(|e| e.to_string())
    };

    let in_dist = |k: RowKind| matches!(k, RowKind::InDist { .. });
    let is_error = |k: RowKind| matches!(k, RowKind::InDist { correct: false });
    let is_success = |k: RowKind| matches!(k, RowKind::InDist { correct: true });
    let not_adv = |k: RowKind| !matches!(k, RowKind::Adversarial);
    let not_ood = |k: RowKind| !matches!(k, RowKind::Ood);
    let is_ood = |k: RowKind| matches!(k, RowKind::Ood);
    let is_adv = |k: RowKind| matches!(k, RowKind::Adversarial);

    let pair = |ev: std::result::Result<RankedEvaluation, String>| match ev {
        Ok(ev) => (
            Metric::Value(average_precision(&ev)),
            Metric::Value(aupr(&ev)),
        ),
        Err(reason) => (
            Metric::Na { na: reason.clone() },
            Metric::Na { na: reason },
        ),
    };

    let (ap_error, aupr_error) = pair(build(&in_dist, &is_error, true, PositiveMeaning::Error));
    let (ap_success, aupr_success) = pair(build(
        &in_dist,
        &is_success,
        false,
        PositiveMeaning::Success,
    ));
    let auroc_metric = match build(&in_dist, &is_error, true, PositiveMeaning::Error) {
        Ok(ev) => Metric::Value(auroc(&ev)),
        Err(reason) => Metric::Na { na: reason },
    };
    let (ap_ood, aupr_ood) = pair(build(&not_adv, &is_ood, true, PositiveMeaning::Ood));
    let (ap_adversarial, aupr_adversarial) =
        pair(build(&not_ood, &is_adv, true, PositiveMeaning::Adversarial));

    MetricRecord {
        ap_error,
        aupr_error,
        ap_success,
        aupr_success,
        auroc: auroc_metric,
        ap_ood,
        aupr_ood,
        ap_adversarial,
        aupr_adversarial,
    }
}
