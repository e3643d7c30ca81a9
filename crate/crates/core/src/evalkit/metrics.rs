use serde::{Deserialize, Serialize};

use crate::dataman::{Label, Split};
use crate::error::{bail_input, Result};

/// Validates a binary scoring problem and returns (positives, negatives).
fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        bail_input!("{} scores for {} labels", scores.len(), labels.len());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail_input!("non-finite score");
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        bail_input!("both classes must be present (pos {pos}, neg {neg})");
    }
    Ok((pos, neg))
}

/// Cumulative (tp, fp) counts after admitting each block of tied scores,
/// scanning thresholds from the highest score downwards.
fn descending_counts(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        if k + 1 == idx.len() || scores[idx[k + 1]] != scores[i] {
            out.push((tp, fp));
        }
    }
    out
}

/// ROC points (fpr, tpr) from (0, 0) to (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check(scores, labels)?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        descending_counts(scores, labels)
            .into_iter()
            .map(|(tp, fp)| (fp as f64 / n as f64, tp as f64 / p as f64)),
    );
    Ok(pts)
}

/// Precision–recall points (recall, precision), one per distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (p, _) = check(scores, labels)?;
    Ok(descending_counts(scores, labels)
        .into_iter()
        .map(|(tp, fp)| (tp as f64 / p as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPr {
    pub auroc: f64,
    pub aupr: f64,
}

/// AUROC by the trapezoidal rule (ties count one half) and AUPR as
/// step-interpolated average precision.
pub fn roc_pr_areas(scores: &[f64], labels: &[bool]) -> Result<RocPr> {
    let roc = roc_curve(scores, labels)?;
    let auroc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    let mut aupr = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in pr_curve(scores, labels)? {
        aupr += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(RocPr { auroc, aupr })
}

/// Confusion metrics at the threshold maximizing Youden's J.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Youden {
    /// A score is called positive when it is strictly above this value.
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
    pub j: f64,
}

/// Searches thresholds below the minimum score, between every pair of
/// adjacent distinct scores and above the maximum score. Ties in J go to the
/// lowest threshold.
pub fn youden_confusion(scores: &[f64], labels: &[bool]) -> Result<Youden> {
    let (p, n) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Start with every score called positive, then raise the threshold past
    // one block of tied scores at a time.
    let (mut tp, mut tn) = (p, 0usize);
    let lowest = scores[idx[0]] - 1.0;
    let score_of = |tp: usize, tn: usize| (tp * n + tn * p) as i128;
    let mut best = (lowest, tp, tn);
    let mut k = 0;
    while k < idx.len() {
        let s = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == s {
            if labels[idx[k]] {
                tp -= 1;
            } else {
                tn += 1;
            }
            k += 1;
        }
        let t = if k < idx.len() {
            s + (scores[idx[k]] - s) / 2.0
        } else {
            s + 1.0
        };
        if score_of(tp, tn) > score_of(best.1, best.2) {
            best = (t, tp, tn);
        }
    }
    let (threshold, tp, tn) = best;
    let fp = n - tn;
    let sensitivity = tp as f64 / p as f64;
    let specificity = tn as f64 / n as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    Ok(Youden {
        threshold,
        sensitivity,
        specificity,
        precision,
        f1,
        j: sensitivity + specificity - 1.0,
    })
}

/// Metric suite for AmyloidPET+ detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupr: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Threshold on p_pos = 1 − p_neg.
    pub youden_threshold: f64,
    pub split: Split,
    pub regime: String,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    /// Scores a set of model outputs given as P(AmyloidPET negative); the
    /// positive class is POS and its score is 1 − p_neg.
    pub fn from_p_neg(p_neg: &[f64], labels: &[Label], split: Split, regime: &str) -> Result<Self> {
        if p_neg.len() != labels.len() {
            bail_input!("{} predictions for {} labels", p_neg.len(), labels.len());
        }
        let mut y = Vec::with_capacity(labels.len());
        for l in labels {
            match l {
                Label::Pos => y.push(true),
                Label::Neg => y.push(false),
                Label::Unknown => bail_input!("cannot score records with UNKNOWN label"),
            }
        }
        let scores: Vec<f64> = p_neg.iter().map(|p| 1.0 - p).collect();
        Self::from_scores(&scores, &y, split, regime)
    }

    pub fn from_scores(scores: &[f64], labels: &[bool], split: Split, regime: &str) -> Result<Self> {
        let areas = roc_pr_areas(scores, labels)?;
        let y = youden_confusion(scores, labels)?;
        let n_pos = labels.iter().filter(|&&v| v).count();
        Ok(Self {
            auroc: areas.auroc,
            aupr: areas.aupr,
            f1: y.f1,
            sensitivity: y.sensitivity,
            specificity: y.specificity,
            precision: y.precision,
            youden_threshold: y.threshold,
            split,
            regime: regime.to_string(),
            n_pos,
            n_neg: labels.len() - n_pos,
        })
    }
}
