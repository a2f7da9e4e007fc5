//! Classification metrics over the policy vocabulary.
//!
//! Every score can be computed from raw (prediction, truth) pairs or from a
//! [`ConfusionMatrix`]. Both paths reduce to the same integer class counts
//! before any floating-point work, so they agree exactly.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    /// Per-class F1 weighted by true support.
    #[default]
    Weighted,
    /// Unweighted mean over classes seen in either truth or predictions.
    Macro,
}

/// Rows are truth, columns are prediction, both in class-index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

/// Per-class tallies that every score is derived from.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Counts {
    hits: Vec<u64>,
    predicted: Vec<u64>,
    actual: Vec<u64>,
    total: u64,
}

fn check_pairs(preds: usize, truths: usize) -> Result<()> {
    if preds != truths {
        return Err(Error::DimensionMismatch { expected: truths, got: preds });
    }
    if preds == 0 {
        return Err(Error::InvalidInput("metrics need at least one sample".into()));
    }
    Ok(())
}

fn check_classes(k: usize, idx: &[usize]) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidSpec("class count must be positive".into()));
    }
    match idx.iter().find(|&&i| i >= k) {
        Some(i) => Err(Error::InvalidInput(format!("class index {i} outside 0..{k}"))),
        None => Ok(()),
    }
}

fn policy_indices(labels: &[Label]) -> Result<Vec<usize>> {
    labels.iter().map(|l| l.policy_index()).collect()
}

impl Counts {
    fn from_pairs(preds: &[usize], truths: &[usize], k: usize) -> Result<Self> {
        check_pairs(preds.len(), truths.len())?;
        check_classes(k, preds)?;
        check_classes(k, truths)?;
        let mut c = Counts { hits: vec![0; k], predicted: vec![0; k], actual: vec![0; k], total: 0 };
        for (&p, &t) in preds.iter().zip(truths) {
            c.predicted[p] += 1;
            c.actual[t] += 1;
            if p == t {
                c.hits[p] += 1;
            }
            c.total += 1;
        }
        Ok(c)
    }

    fn accuracy(&self) -> f64 {
        self.hits.iter().sum::<u64>() as f64 / self.total as f64
    }

    fn class_f1(&self, k: usize) -> f64 {
        // 2PR/(P+R) simplifies to 2tp/(pred + actual)
        let denom = self.predicted[k] + self.actual[k];
        if denom == 0 {
            0.0
        } else {
            2.0 * self.hits[k] as f64 / denom as f64
        }
    }

    fn f1(&self, avg: F1Average) -> f64 {
        let k = self.hits.len();
        match avg {
            F1Average::Weighted => {
                (0..k).map(|c| self.actual[c] as f64 * self.class_f1(c)).sum::<f64>() / self.total as f64
            }
            F1Average::Macro => {
                let seen: Vec<usize> = (0..k).filter(|&c| self.predicted[c] + self.actual[c] > 0).collect();
                seen.iter().map(|&c| self.class_f1(c)).sum::<f64>() / seen.len() as f64
            }
        }
    }

    /// Gorodkin's multiclass MCC; a zero denominator gives 0.
    fn mcc(&self) -> f64 {
        let s = self.total as f64;
        let c = self.hits.iter().sum::<u64>() as f64;
        let pt: f64 = self.predicted.iter().zip(&self.actual).map(|(&p, &t)| p as f64 * t as f64).sum();
        let pp: f64 = self.predicted.iter().map(|&p| (p as f64).powi(2)).sum();
        let tt: f64 = self.actual.iter().map(|&t| (t as f64).powi(2)).sum();
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (c * s - pt) / denom
        }
    }
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![vec![0; k]; k] }
    }

    pub fn from_indices(preds: &[usize], truths: &[usize], k: usize) -> Result<Self> {
        check_pairs(preds.len(), truths.len())?;
        check_classes(k, preds)?;
        check_classes(k, truths)?;
        let mut m = Self::zeros(k);
        for (&p, &t) in preds.iter().zip(truths) {
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    /// Over the three-way policy vocabulary.
    pub fn from_labels(preds: &[Label], truths: &[Label]) -> Result<Self> {
        Self::from_indices(&policy_indices(preds)?, &policy_indices(truths)?, Label::POLICY.len())
    }

    pub fn from_rows(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn tallies(&self) -> Result<Counts> {
        let k = self.classes();
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidInput("metrics need at least one sample".into()));
        }
        Ok(Counts {
            hits: (0..k).map(|c| self.counts[c][c]).collect(),
            predicted: (0..k).map(|c| (0..k).map(|t| self.counts[t][c]).sum()).collect(),
            actual: self.counts.iter().map(|r| r.iter().sum()).collect(),
            total,
        })
    }

    pub fn accuracy(&self) -> Result<f64> {
        Ok(self.tallies()?.accuracy())
    }

    pub fn f1(&self, avg: F1Average) -> Result<f64> {
        Ok(self.tallies()?.f1(avg))
    }

    /// F1 of one class treated as the positive class.
    pub fn class_f1(&self, class: usize) -> Result<f64> {
        check_classes(self.classes(), &[class])?;
        Ok(self.tallies()?.class_f1(class))
    }

    pub fn mcc(&self) -> Result<f64> {
        Ok(self.tallies()?.mcc())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let t = self.tallies()?;
        Ok(MetricsReport {
            acc: t.accuracy(),
            f1_weighted: t.f1(F1Average::Weighted),
            f1_macro: t.f1(F1Average::Macro),
            mcc: t.mcc(),
            confusion: self.counts.clone(),
        })
    }
}

pub fn accuracy_indices(preds: &[usize], truths: &[usize], k: usize) -> Result<f64> {
    Ok(Counts::from_pairs(preds, truths, k)?.accuracy())
}

pub fn f1_indices(preds: &[usize], truths: &[usize], k: usize, avg: F1Average) -> Result<f64> {
    Ok(Counts::from_pairs(preds, truths, k)?.f1(avg))
}

pub fn mcc_indices(preds: &[usize], truths: &[usize], k: usize) -> Result<f64> {
    Ok(Counts::from_pairs(preds, truths, k)?.mcc())
}

pub fn accuracy(preds: &[Label], truths: &[Label]) -> Result<f64> {
    accuracy_indices(&policy_indices(preds)?, &policy_indices(truths)?, 3)
}

pub fn f1(preds: &[Label], truths: &[Label], avg: F1Average) -> Result<f64> {
    f1_indices(&policy_indices(preds)?, &policy_indices(truths)?, 3, avg)
}

pub fn mcc(preds: &[Label], truths: &[Label]) -> Result<f64> {
    mcc_indices(&policy_indices(preds)?, &policy_indices(truths)?, 3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1_weighted: f64,
    pub f1_macro: f64,
    pub mcc: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_labels(preds: &[Label], truths: &[Label]) -> Result<Self> {
        ConfusionMatrix::from_labels(preds, truths)?.report()
    }
}
