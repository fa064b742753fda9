//! Evaluation kernels.
//!
//! ROC AUC uses the rank-sum formulation with mid-ranks for ties. The
//! statistic is accumulated as the integer `2U = 2·wins + ties` so the result
//! is the exact rational `2U / 2PN` rounded once, identical to counting pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Model;
use crate::tabular::Dataset;

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before
/// taking logarithms.
pub const PROB_CLAMP: f64 = 1e-12;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy `H(a, b) = -a ln b - (1-a) ln(1-b)` with clamping.
pub fn binary_cross_entropy(a: f64, b: f64) -> f64 {
    let b = clamp_prob(b);
    -a * b.ln() - (1.0 - a) * (1.0 - b).ln()
}

fn check_pair(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::invalid("metric over an empty set"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let (positives, negatives) = class_counts(labels);
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN rejected above"));

    // Sum over positives of twice their (1-based) mid-rank.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u128;
        twice_rank_sum += (start as u128 + 1 + end as u128) * pos_in_group;
        start = end;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u128) as f64)
}

pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| binary_cross_entropy(y as f64, s))
        .sum();
    Ok(total / scores.len() as f64)
}

/// Fraction of rows where `score >= 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= 0.5) == (y == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Product-moment correlation. Errors when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("pearson needs at least two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ConstantVector);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub log_loss: f64,
    pub accuracy: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let (n_pos, n_neg) = class_counts(labels);
        Ok(EvalReport {
            auc: roc_auc(scores, labels)?,
            log_loss: log_loss(scores, labels)?,
            accuracy: accuracy(scores, labels)?,
            n_pos,
            n_neg,
        })
    }

    pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Self> {
        Self::from_scores(&model.predict(ds)?, ds.labels())
    }
}

/// Symmetric matrix of pairwise correlations, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub size: usize,
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Mean correlation between consecutive entries `(i, i+1)`.
    pub fn mean_consecutive(&self) -> f64 {
        let pairs = self.size.saturating_sub(1);
        (0..pairs).map(|i| self.get(i, i + 1)).sum::<f64>() / pairs.max(1) as f64
    }

    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("model");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for i in 0..self.size {
            out.push_str(&labels[i]);
            for j in 0..self.size {
                out.push_str(&format!(",{:?}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }
}

pub fn correlation_matrix(predictions: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    let m = predictions.len();
    if m < 2 {
        return Err(Error::invalid("correlation matrix needs at least two prediction vectors"));
    }
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in i + 1..m {
            let r = pearson(&predictions[i], &predictions[j])?;
            values[i * m + j] = r;
            values[j * m + i] = r;
        }
    }
    Ok(CorrelationMatrix { size: m, values })
}

/// Pairwise correlations of the models' predictions on `rows`.
pub fn generation_correlation_matrix(models: &[&Model], rows: &Dataset) -> Result<CorrelationMatrix> {
    let preds = models.iter().map(|m| m.predict(rows)).collect::<Result<Vec<_>>>()?;
    correlation_matrix(&preds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitProbe {
    pub train: EvalReport,
    pub test: EvalReport,
    /// `train.auc - test.auc`
    pub gap: f64,
}

pub fn overfit_probe(model: &Model, train: &Dataset, test: &Dataset) -> Result<OverfitProbe> {
    let train = EvalReport::evaluate(model, train)?;
    let test = EvalReport::evaluate(model, test)?;
    Ok(OverfitProbe {
        train,
        test,
        gap: train.auc - test.auc,
    })
}
