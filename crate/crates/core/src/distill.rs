//! Input-data distillation: teacher scores become per-row target weights,
//! rows the teacher strongly disagrees with are dropped, and students are
//! trained generation after generation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{LearnerSpec, Model, TrainingTarget};
use crate::metrics::EvalReport;
use crate::tabular::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// The previous generation teaches.
    FromLast,
    /// The uniform average of all previous generations teaches.
    FromEnsemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    RowWeighted,
    LabelSampled,
}

/// How learner seeds vary across generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSchedule {
    /// Generation `g` trains with the learner seed plus `g`.
    #[default]
    PerGeneration,
    /// Every generation uses the learner seed unchanged.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub beta: f64,
    pub denoise_threshold: f64,
    /// Number of students trained after the teacher.
    pub generations: usize,
    pub teacher_mode: TeacherMode,
    pub target_mode: TargetMode,
    pub include_original: bool,
    pub seed: u64,
    pub seed_schedule: SeedSchedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.7,
            denoise_threshold: 0.99,
            generations: 5,
            teacher_mode: TeacherMode::FromLast,
            target_mode: TargetMode::RowWeighted,
            include_original: false,
            seed: 0,
            seed_schedule: SeedSchedule::PerGeneration,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        check_threshold(self.denoise_threshold)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("denoise threshold must lie in (0, 1], got {t}")));
    }
    Ok(())
}

fn check_scores(ds: &Dataset, scores: &[f64]) -> Result<()> {
    if scores.len() != ds.n_rows() {
        return Err(Error::LengthMismatch {
            expected: ds.n_rows(),
            found: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid(format!("teacher score {} at row {i} is outside [0, 1]", scores[i])));
    }
    Ok(())
}

/// `w⁺ = β·f + (1-β)·y` and `w⁻ = 1 - w⁺`, so every pair sums to exactly 1.
pub fn make_targets(train: &Dataset, teacher_scores: &[f64], beta: f64) -> Result<TrainingTarget> {
    check_scores(train, teacher_scores)?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta must lie in [0, 1], got {beta}")));
    }
    let positive: Vec<f64> = teacher_scores
        .iter()
        .zip(train.labels())
        .map(|(&f, &y)| beta * f + (1.0 - beta) * y as f64)
        .collect();
    let negative = positive.iter().map(|w| 1.0 - w).collect();
    Ok(TrainingTarget::RowWeighted { positive, negative })
}

/// Draws `z_i ~ Bernoulli(w⁺ / (w⁺ + w⁻))` for every row.
pub fn targets_to_sampled(target: &TrainingTarget, seed: u64) -> Result<TrainingTarget> {
    let TrainingTarget::RowWeighted { positive, negative } = target else {
        return Err(Error::invalid("label sampling needs a row-weighted target"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(positive.len());
    for (i, (p, q)) in positive.iter().zip(negative).enumerate() {
        let total = p + q;
        if !(total > 0.0) {
            return Err(Error::ZeroWeightRow(i));
        }
        labels.push((rng.random::<f64>() < p / total) as u8);
    }
    Ok(TrainingTarget::LabelSampled { labels })
}

/// Positions of rows with `|f - y| < threshold`. A threshold of 1 keeps
/// every row, including scores saturated at exactly 0 or 1.
fn kept_positions(train: &Dataset, scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    check_scores(train, scores)?;
    check_threshold(threshold)?;
    if threshold >= 1.0 {
        return Ok((0..train.n_rows()).collect());
    }
    Ok(scores
        .iter()
        .zip(train.labels())
        .enumerate()
        .filter(|(_, (&f, &y))| (f - y as f64).abs() < threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Drops rows whose teacher score is at least `threshold` away from the
/// label. Returns the survivors and the row ids of the dropped rows.
pub fn denoise(train: &Dataset, teacher_scores: &[f64], threshold: f64) -> Result<(Dataset, Vec<u64>)> {
    let kept = kept_positions(train, teacher_scores, threshold)?;
    if kept.is_empty() {
        return Err(Error::AllRowsDropped { threshold });
    }
    let mut dropped = Vec::new();
    let mut k = kept.iter().peekable();
    for (i, &id) in train.row_ids().iter().enumerate() {
        if k.peek() == Some(&&i) {
            k.next();
        } else {
            dropped.push(id);
        }
    }
    Ok((train.select(&kept)?, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    /// `labels`, `gen <g>` or `ensemble 0..<g>`.
    pub teacher: String,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    /// Test metrics of this generation alone.
    pub individual: EvalReport,
    /// Test metrics of the uniform average of generations `0..=index`.
    pub ensemble: EvalReport,
}

#[derive(Debug, Clone)]
pub struct GenerationRun {
    pub records: Vec<GenerationRecord>,
    pub models: Vec<Arc<Model>>,
}

impl GenerationRun {
    /// Ledger as CSV: gen, individual_auc, ensemble_auc, rows_kept, rows_dropped.
    pub fn ledger_csv(&self) -> String {
        ledger_csv(&self.records)
    }
}

pub fn ledger_csv(records: &[GenerationRecord]) -> String {
    let mut out = String::from("gen,individual_auc,ensemble_auc,rows_kept,rows_dropped\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.index, r.individual.auc, r.ensemble.auc, r.rows_kept, r.rows_dropped
        ));
    }
    out
}

/// Mean of prediction vectors, summed in order.
pub(crate) fn uniform_mean(preds: &[Vec<f64>]) -> Vec<f64> {
    let m = preds.len() as f64;
    let mut out = vec![0.0; preds[0].len()];
    for p in preds {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= m);
    out
}

/// Trains the teacher on hard labels, then `cfg.generations` students on
/// denoised, β-mixed teacher scores. `test` is used only for the records.
pub fn run_generations(
    spec: &LearnerSpec,
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
    cfg: &DistillConfig,
) -> Result<GenerationRun> {
    cfg.validate()?;
    spec.validate()?;
    let fp = train.schema().fingerprint();
    if valid.schema().fingerprint() != fp || test.schema().fingerprint() != fp {
        return Err(Error::Schema("train, valid and test must share a schema".into()));
    }
    let valid_arg = spec.needs_validation().then_some(valid);
    let n = train.n_rows();
    let id_offset = train.row_ids().iter().max().map_or(0, |m| m + 1);

    let mut models: Vec<Arc<Model>> = Vec::new();
    let mut train_preds: Vec<Vec<f64>> = Vec::new();
    let mut test_preds: Vec<Vec<f64>> = Vec::new();
    let mut records = Vec::new();

    for g in 0..=cfg.generations {
        let seed = match cfg.seed_schedule {
            SeedSchedule::PerGeneration => spec.seed().wrapping_add(g as u64),
            SeedSchedule::Fixed => spec.seed(),
        };
        let gen_spec = spec.with_seed(seed);
        let (model, teacher, kept) = if g == 0 {
            let m = Model::train(&gen_spec, train, &TrainingTarget::HardLabels, valid_arg)?;
            (m, "labels".to_string(), n)
        } else {
            let (scores, teacher) = match cfg.teacher_mode {
                TeacherMode::FromLast => (train_preds[g - 1].clone(), format!("gen {}", g - 1)),
                TeacherMode::FromEnsemble => (uniform_mean(&train_preds), format!("ensemble 0..{}", g - 1)),
            };
            let positions = kept_positions(train, &scores, cfg.denoise_threshold)?;
            if positions.is_empty() {
                return Err(Error::AllRowsDropped {
                    threshold: cfg.denoise_threshold,
                });
            }
            let kept_ds = train.select(&positions)?;
            let kept_scores: Vec<f64> = positions.iter().map(|&i| scores[i]).collect();
            let mut target = make_targets(&kept_ds, &kept_scores, cfg.beta)?;
            if cfg.target_mode == TargetMode::LabelSampled {
                target = targets_to_sampled(&target, cfg.seed.wrapping_add(g as u64))?;
            }
            let (data, target) = if cfg.include_original {
                append_original(&kept_ds, target, train, id_offset)?
            } else {
                (kept_ds, target)
            };
            let m = Model::train(&gen_spec, &data, &target, valid_arg)?;
            (m, teacher, positions.len())
        };
        train_preds.push(model.predict(train)?);
        test_preds.push(model.predict(test)?);
        let individual = EvalReport::from_scores(&test_preds[g], test.labels())?;
        let ensemble = EvalReport::from_scores(&uniform_mean(&test_preds), test.labels())?;
        records.push(GenerationRecord {
            index: g,
            teacher,
            rows_kept: kept,
            rows_dropped: n - kept,
            individual,
            ensemble,
        });
        models.push(Arc::new(model));
    }
    Ok(GenerationRun { records, models })
}

fn append_original(
    kept: &Dataset,
    target: TrainingTarget,
    original: &Dataset,
    id_offset: u64,
) -> Result<(Dataset, TrainingTarget)> {
    let data = kept.concat(&original.with_row_id_offset(id_offset))?;
    let labels = original.labels();
    let target = match target {
        TrainingTarget::RowWeighted {
            mut positive,
            mut negative,
        } => {
            positive.extend(labels.iter().map(|&y| y as f64));
            negative.extend(labels.iter().map(|&y| 1.0 - y as f64));
            TrainingTarget::RowWeighted { positive, negative }
        }
        TrainingTarget::LabelSampled { labels: mut z } => {
            z.extend_from_slice(labels);
            TrainingTarget::LabelSampled { labels: z }
        }
        TrainingTarget::HardLabels => TrainingTarget::HardLabels,
    };
    Ok((data, target))
}
