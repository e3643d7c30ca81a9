use serde::{Deserialize, Serialize};

use crate::dataman::Modality;
use crate::error::{bail_input, Result};

/// Multiclass Matthews correlation (Gorodkin's R_K) of a confusion matrix
/// with rows = true class and columns = predicted class. Zero when either
/// marginal is degenerate.
pub fn mcc_multiclass(confusion: &[Vec<u64>]) -> Result<f64> {
    let k = confusion.len();
    if k == 0 {
        bail_input!("empty confusion matrix");
    }
    if confusion.iter().any(|row| row.len() != k) {
        bail_input!("confusion matrix must be square");
    }
    let s: f64 = confusion.iter().flatten().map(|&v| v as f64).sum();
    if s == 0.0 {
        bail_input!("confusion matrix has no counts");
    }
    let c: f64 = (0..k).map(|i| confusion[i][i] as f64).sum();
    let t: Vec<f64> = confusion.iter().map(|row| row.iter().map(|&v| v as f64).sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| confusion.iter().map(|row| row[j] as f64).sum()).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(((c * s - pt) / den).clamp(-1.0, 1.0))
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != predicted.len() {
        bail_input!("{} truths for {} predictions", truth.len(), predicted.len());
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= k || p >= k {
            bail_input!("class index out of range for {k} classes");
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub modality: Modality,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub classes: Vec<Modality>,
    pub confusion: Vec<Vec<u64>>,
    pub mcc: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MulticlassReport {
    pub fn new(classes: &[Modality], confusion: Vec<Vec<u64>>) -> Result<Self> {
        let mcc = mcc_multiclass(&confusion)?;
        let k = classes.len();
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = (0..k)
            .map(|i| {
                let tp = confusion[i][i] as f64;
                let support: u64 = confusion[i].iter().sum();
                let predicted: u64 = confusion.iter().map(|r| r[i]).sum();
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = if support == 0 { 0.0 } else { tp / support as f64 };
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    modality: classes[i],
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect();
        Ok(Self {
            classes: classes.to_vec(),
            confusion,
            mcc,
            accuracy: correct as f64 / total as f64,
            per_class,
        })
    }
}
