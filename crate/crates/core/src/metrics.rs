//! Accuracy, ROC AUC and the evaluation report.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of `(fake, real)` pairs ranked correctly, ties counted half, as
/// an exact ratio `(numerator / 2) / (positives * negatives)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AucRatio {
    /// Twice the number of correctly ordered pairs plus the tied pairs.
    pub twice_wins: u128,
    pub pairs: u128,
}

impl AucRatio {
    pub fn value(self) -> f64 {
        self.twice_wins as f64 / (2 * self.pairs) as f64
    }
}

/// Mann-Whitney pair count over sorted scores.
pub fn auc_ratio(scores: &[f64], labels: &[usize]) -> Result<AucRatio> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC is undefined with a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut twice_wins = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let p = group.iter().filter(|&&k| labels[k] == 1).count() as u128;
        let n = group.len() as u128 - p;
        twice_wins += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(AucRatio { twice_wins, pairs: pos * neg })
}

pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    auc_ratio(scores, labels).map(AucRatio::value)
}

/// Fraction of samples with `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[usize], threshold: f64) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let correct = scores.iter().zip(labels).filter(|(&s, &l)| usize::from(s >= threshold) == l).count();
    Ok(correct as f64 / scores.len() as f64)
}

/// One row of a training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub acc: f64,
    pub auc: f64,
    pub n_samples: usize,
    pub curves: Vec<EpochMetrics>,
    pub config_fingerprint: u64,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(scores: &[f64], labels: &[usize], curves: Vec<EpochMetrics>, config_fingerprint: u64, seed: u64) -> Result<Self> {
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            acc: accuracy(scores, labels, 0.5)?,
            auc: auc(scores, labels)?,
            n_samples: scores.len(),
            curves,
            config_fingerprint,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Metric(format!("unsupported report schema version {}", self.schema_version)));
        }
        for (name, v) in [("acc", self.acc), ("auc", self.auc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Metric(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.n_samples == 0 {
            return Err(Error::Metric("report without samples".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.2, 0.8, 0.1], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.6, 0.4], &[0, 1], 0.5).unwrap(), 0.0);
        assert_eq!(accuracy(&[0.6, 0.6, 0.4, 0.1], &[1, 0, 0, 0], 0.5).unwrap(), 0.75);
    }

    #[test]
    fn report_rejects_out_of_range() {
        let mut r = MetricsReport::new(&[0.9, 0.1], &[1, 0], Vec::new(), 0, 0).unwrap();
        r.validate().unwrap();
        r.acc = 1.5;
        assert!(r.validate().is_err());
    }
}
