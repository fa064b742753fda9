//! Seeded synthetic binary-classification tables for experiments and tests.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Column, Dataset, FeatureKind, Schema};

pub const LABEL_COLUMN: &str = "label";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub rows: usize,
    pub features: usize,
    /// Features `0..informative` drive the label; the rest are noise.
    pub informative: usize,
    /// Adds pairwise products and a sine term to the latent score.
    pub nonlinear: bool,
    /// Standard deviation of Gaussian noise added to the latent score.
    pub margin_noise: f64,
    /// Fraction of labels flipped after generation.
    pub flip_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            rows: 1000,
            features: 10,
            informative: 5,
            nonlinear: true,
            margin_noise: 0.5,
            flip_rate: 0.0,
            seed: 0,
        }
    }
}

fn float_schema(d: usize) -> Schema {
    let mut cols: Vec<Column> = (0..d).map(|j| Column::new(format!("f{j}"), FeatureKind::Float)).collect();
    cols.push(Column::new(LABEL_COLUMN, FeatureKind::Int));
    Schema::new(cols, LABEL_COLUMN).expect("generated schema is valid")
}

/// Gaussian features with labels from a thresholded latent score.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.rows == 0 || cfg.features == 0 || cfg.informative == 0 || cfg.informative > cfg.features {
        return Err(Error::invalid("synthetic data needs rows, features and 1 <= informative <= features"));
    }
    if !(0.0..=0.5).contains(&cfg.flip_rate) || !(cfg.margin_noise >= 0.0) {
        return Err(Error::invalid("flip_rate must lie in [0, 0.5] and margin_noise be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.features;
    let k = cfg.informative;
    let coef: Vec<f64> = (0..k)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.5..1.5) / (k as f64).sqrt()
        })
        .collect();
    let mut features = Vec::with_capacity(cfg.rows * d);
    let mut labels = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut s: f64 = coef.iter().zip(&x).map(|(c, v)| c * v).sum();
        if cfg.nonlinear {
            for j in 0..k.saturating_sub(1) {
                s += 0.5 * x[j] * x[j + 1];
            }
            s += (2.0 * x[k - 1]).sin();
        }
        let eps: f64 = StandardNormal.sample(&mut rng);
        labels.push((s + cfg.margin_noise * eps > 0.0) as u8);
        features.extend(x);
    }
    let ds = Dataset::new(float_schema(d), features, labels, (0..cfg.rows as u64).collect())?;
    if cfg.flip_rate > 0.0 {
        flip_labels(&ds, cfg.flip_rate, cfg.seed.wrapping_add(0x5eed))
    } else {
        Ok(ds)
    }
}

/// Flips exactly `round(rate·N)` labels chosen uniformly without
/// replacement.
pub fn flip_labels(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("flip rate must lie in [0, 1]"));
    }
    let n = ds.n_rows();
    let count = (rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = ds.labels().to_vec();
    for i in sample(&mut rng, n, count).iter() {
        labels[i] ^= 1;
    }
    Dataset::new(ds.schema().clone(), ds.features().to_vec(), labels, ds.row_ids().to_vec())
}

/// Two features with label `1{f0 + f1 > 0}`.
pub fn separable(rows: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(rows * 2);
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        features.extend([a, b]);
        labels.push((a + b > 0.0) as u8);
    }
    Dataset::new(float_schema(2), features, labels, (0..rows as u64).collect())
}
