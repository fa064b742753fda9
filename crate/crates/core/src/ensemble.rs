//! Weighted prediction averages and Differential Evolution search for the
//! weights that maximize validation AUC.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Model;
use crate::metrics::roc_auc;
use crate::tabular::Dataset;

const ENSEMBLE_FORMAT: &str = "tabdistill.ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

/// Member models and their nonnegative blending weights. A row's prediction
/// is `Σ w_m·p_m / Σ w_m`.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<Arc<Model>>,
    weights: Vec<f64>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Arc<Model>>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if weights.len() != members.len() {
            return Err(Error::LengthMismatch {
                expected: members.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("ensemble weights must be finite and nonnegative"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("ensemble weights are all zero"));
        }
        let fp = members[0].fingerprint();
        if members.iter().any(|m| m.fingerprint() != fp) {
            return Err(Error::Schema("ensemble members were trained on different schemas".into()));
        }
        Ok(EnsembleModel { members, weights })
    }

    pub fn members(&self) -> &[Arc<Model>] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Indices of members with nonzero weight.
    pub fn active(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&m| self.weights[m] > 0.0).collect()
    }

    pub fn predict(&self, rows: &Dataset) -> Result<Vec<f64>> {
        let mut preds = Vec::with_capacity(self.members.len());
        for (m, w) in self.members.iter().zip(&self.weights) {
            if *w > 0.0 {
                preds.push(m.predict(rows)?);
            } else {
                // still enforce the schema contract for skipped members
                if rows.schema().fingerprint() != m.fingerprint() {
                    return Err(Error::Schema("rows do not match the ensemble's schema".into()));
                }
                preds.push(Vec::new());
            }
        }
        blend(&preds, &self.weights)
    }

    /// Writes the ensemble document. `member_files` are stored verbatim
    /// and resolved relative to the document's directory on load.
    pub fn save(&self, path: &Path, member_files: &[String]) -> Result<()> {
        if member_files.len() != self.members.len() {
            return Err(Error::LengthMismatch {
                expected: self.members.len(),
                found: member_files.len(),
            });
        }
        let doc = EnsembleDocument {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            members: member_files
                .iter()
                .zip(&self.weights)
                .map(|(f, w)| MemberEntry {
                    file: f.clone(),
                    weight: *w,
                })
                .collect(),
        };
        crate::io::write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: EnsembleDocument = serde_json::from_str(&crate::io::read_to_string(path)?)
            .map_err(|e| Error::Corrupted(format!("ensemble document: {e}")))?;
        if doc.format != ENSEMBLE_FORMAT {
            return Err(Error::Corrupted(format!("unexpected format tag `{}`", doc.format)));
        }
        if doc.version != ENSEMBLE_VERSION {
            return Err(Error::VersionMismatch {
                found: doc.version,
                expected: ENSEMBLE_VERSION,
            });
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut members = Vec::new();
        let mut weights = Vec::new();
        for entry in doc.members {
            members.push(Arc::new(Model::load(&base.join(&entry.file))?));
            weights.push(entry.weight);
        }
        EnsembleModel::new(members, weights)
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleDocument {
    format: String,
    version: u32,
    members: Vec<MemberEntry>,
}

#[derive(Serialize, Deserialize)]
struct MemberEntry {
    file: String,
    weight: f64,
}

/// Every member with weight 1.
pub fn uniform_ensemble(members: Vec<Arc<Model>>) -> Result<EnsembleModel> {
    let n = members.len();
    EnsembleModel::new(members, vec![1.0; n])
}

pub fn predict_ensemble(ens: &EnsembleModel, rows: &Dataset) -> Result<Vec<f64>> {
    ens.predict(rows)
}

/// Normalized weighted mean of prediction vectors. Members with zero
/// weight are skipped and may be empty. Terms are summed in sorted order,
/// so the result does not depend on member order.
pub fn blend(preds: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let mut active: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    active.sort_by(f64::total_cmp);
    let total: f64 = active.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("ensemble weights are all zero"));
    }
    let members: Vec<(&Vec<f64>, f64)> = preds.iter().zip(weights.iter().copied()).filter(|(_, w)| *w > 0.0).collect();
    let n = members[0].0.len();
    if let Some((p, _)) = members.iter().find(|(p, _)| p.len() != n) {
        return Err(Error::LengthMismatch { expected: n, found: p.len() });
    }
    let mut terms = Vec::with_capacity(members.len());
    let out = (0..n)
        .map(|i| {
            terms.clear();
            terms.extend(members.iter().map(|(p, w)| w * p[i]));
            terms.sort_by(f64::total_cmp);
            (terms.iter().sum::<f64>() / total).clamp(0.0, 1.0)
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DEConfig {
    /// Defaults to ten per member. Raised to at least `members + 1` so that
    /// the uniform vector and every one-hot vector fit in the first
    /// population.
    pub population_size: Option<usize>,
    pub mutation_factor: f64,
    pub crossover_rate: f64,
    pub max_iterations: usize,
    pub bounds: (f64, f64),
    pub prune_epsilon: f64,
    pub seed: u64,
}

impl Default for DEConfig {
    fn default() -> Self {
        DEConfig {
            population_size: None,
            mutation_factor: 0.5,
            crossover_rate: 0.9,
            max_iterations: 200,
            bounds: (0.0, 1.0),
            prune_epsilon: 0.01,
            seed: 0,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size.is_some_and(|p| p < 4) {
            return Err(Error::invalid("DE population must be at least 4"));
        }
        if !(self.mutation_factor > 0.0 && self.mutation_factor <= 2.0) {
            return Err(Error::invalid("DE mutation factor must lie in (0, 2]"));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::invalid("DE crossover rate must lie in [0, 1]"));
        }
        let (lo, hi) = self.bounds;
        if !(lo == 0.0 && hi > 0.0 && hi.is_finite()) {
            return Err(Error::invalid("DE bounds must be [0, hi] with hi > 0"));
        }
        if !(self.prune_epsilon >= 0.0) {
            return Err(Error::invalid("prune epsilon must be nonnegative"));
        }
        Ok(())
    }

    fn population_for(&self, members: usize) -> usize {
        self.population_size.unwrap_or(10 * members).max(members + 1).max(4)
    }
}

/// Everything the optimizer saw, for the weights audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub uniform_objective: f64,
    pub member_objectives: Vec<f64>,
    /// Objectives of extra starting points (each family's own optimum when
    /// combining families).
    pub seeded_objectives: Vec<f64>,
    pub pre_prune_weights: Vec<f64>,
    pub pre_prune_objective: f64,
    /// Members whose normalized weight reached the prune threshold.
    pub survivors: Vec<usize>,
    /// Full-length weights after pruning and re-optimization (zeros for
    /// pruned members).
    pub final_weights: Vec<f64>,
    pub final_objective: f64,
    /// False when the re-optimized pruned ensemble scored below the
    /// incumbents and the unpruned optimum was kept instead.
    pub pruned_accepted: bool,
    /// Best-so-far objective after each iteration of the first search.
    pub history: Vec<f64>,
    /// Same for the search over survivors (empty when nothing was pruned).
    pub pruned_history: Vec<f64>,
}

impl OptimizationReport {
    /// CSV with one row per member: index, member label, pre- and
    /// post-pruning weights, survivor flag.
    pub fn audit_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("member,label,pre_prune_weight,final_weight,survived\n");
        for m in 0..self.pre_prune_weights.len() {
            let label = labels.get(m).map(String::as_str).unwrap_or("");
            out.push_str(&format!(
                "{m},{label},{},{},{}\n",
                self.pre_prune_weights[m],
                self.final_weights[m],
                self.survivors.contains(&m)
            ));
        }
        out
    }
}

fn objective(preds: &[Vec<f64>], weights: &[f64], labels: &[u8]) -> Result<f64> {
    if weights.iter().all(|w| *w <= 0.0) {
        return Ok(f64::NEG_INFINITY);
    }
    roc_auc(&blend(preds, weights)?, labels)
}

fn count_active(w: &[f64], eps: f64) -> usize {
    let total: f64 = w.iter().sum();
    w.iter().filter(|v| **v / total >= eps && **v > 0.0).count()
}

struct SearchResult {
    weights: Vec<f64>,
    objective: f64,
    history: Vec<f64>,
}

/// DE/rand/1/bin over `[0, hi]^M` with a generational update. The first
/// population holds the all-`hi` vector, every one-hot vector and any
/// `extra` seeds before random fill.
fn differential_evolution(
    preds: &[Vec<f64>],
    labels: &[u8],
    cfg: &DEConfig,
    extra: &[Vec<f64>],
    seed: u64,
) -> Result<SearchResult> {
    let m = preds.len();
    let hi = cfg.bounds.1;
    let np = cfg.population_for(m).max(m + 1 + extra.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pop: Vec<Vec<f64>> = Vec::with_capacity(np);
    pop.push(vec![hi; m]);
    for j in 0..m {
        let mut v = vec![0.0; m];
        v[j] = hi;
        pop.push(v);
    }
    pop.extend(extra.iter().cloned());
    while pop.len() < np {
        pop.push((0..m).map(|_| rng.random_range(0.0..=hi)).collect());
    }
    let mut fit: Vec<f64> = pop.iter().map(|w| objective(preds, w, labels)).collect::<Result<_>>()?;
    let mut history = Vec::with_capacity(cfg.max_iterations);

    for _ in 0..cfg.max_iterations {
        let spread = fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - fit.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread == 0.0 {
            break;
        }
        let mut next_pop = pop.clone();
        let mut next_fit = fit.clone();
        for i in 0..np {
            let mut pick = |taken: &[usize]| loop {
                let r = rng.random_range(0..np);
                if !taken.contains(&r) {
                    return r;
                }
            };
            let a = pick(&[i]);
            let b = pick(&[i, a]);
            let c = pick(&[i, a, b]);
            let jrand = rng.random_range(0..m);
            let trial: Vec<f64> = (0..m)
                .map(|j| {
                    let cross = rng.random::<f64>() < cfg.crossover_rate || j == jrand;
                    if cross {
                        (pop[a][j] + cfg.mutation_factor * (pop[b][j] - pop[c][j])).clamp(0.0, hi)
                    } else {
                        pop[i][j]
                    }
                })
                .collect();
            let f = objective(preds, &trial, labels)?;
            if f > fit[i] {
                next_pop[i] = trial;
                next_fit[i] = f;
            }
        }
        pop = next_pop;
        fit = next_fit;
        history.push(fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    // best objective, then fewest non-negligible members, then lowest index
    let mut best = 0;
    for i in 1..np {
        let better = fit[i] > fit[best]
            || (fit[i] == fit[best]
                && count_active(&pop[i], cfg.prune_epsilon) < count_active(&pop[best], cfg.prune_epsilon));
        if better {
            best = i;
        }
    }
    Ok(SearchResult {
        weights: pop.swap_remove(best),
        objective: fit[best],
        history,
    })
}

/// Searches blending weights that maximize validation AUC, then zeroes
/// members whose normalized weight is below `prune_epsilon` and searches
/// again over the survivors. The result never scores below the uniform
/// ensemble or any single member on `valid` (up to 1e-9).
pub fn optimize_weights(
    ens: &EnsembleModel,
    valid: &Dataset,
    cfg: &DEConfig,
) -> Result<(EnsembleModel, OptimizationReport)> {
    optimize_seeded(ens, valid, cfg, &[])
}

/// [`optimize_weights`] with extra weight vectors placed in the first
/// population; the result also never scores below any of them.
fn optimize_seeded(
    ens: &EnsembleModel,
    valid: &Dataset,
    cfg: &DEConfig,
    extra: &[Vec<f64>],
) -> Result<(EnsembleModel, OptimizationReport)> {
    cfg.validate()?;
    let labels = valid.labels();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: labels.len() - pos,
        });
    }
    let preds: Vec<Vec<f64>> = ens.members.iter().map(|m| m.predict(valid)).collect::<Result<_>>()?;
    let m = preds.len();
    let uniform_objective = objective(&preds, &vec![1.0; m], labels)?;
    let member_objectives: Vec<f64> = preds.iter().map(|p| roc_auc(p, labels)).collect::<Result<_>>()?;
    let seeded_objectives: Vec<f64> = extra.iter().map(|w| objective(&preds, w, labels)).collect::<Result<_>>()?;
    let incumbent = member_objectives
        .iter()
        .chain(&seeded_objectives)
        .cloned()
        .fold(uniform_objective, f64::max);

    if m == 1 {
        let report = OptimizationReport {
            uniform_objective,
            member_objectives,
            seeded_objectives,
            pre_prune_weights: vec![cfg.bounds.1],
            pre_prune_objective: uniform_objective,
            survivors: vec![0],
            final_weights: vec![cfg.bounds.1],
            final_objective: uniform_objective,
            pruned_accepted: true,
            history: Vec::new(),
            pruned_history: Vec::new(),
        };
        return Ok((EnsembleModel::new(ens.members.clone(), vec![cfg.bounds.1])?, report));
    }

    let first = differential_evolution(&preds, labels, cfg, extra, cfg.seed)?;
    let total: f64 = first.weights.iter().sum();
    let survivors: Vec<usize> = (0..m)
        .filter(|&j| first.weights[j] > 0.0 && first.weights[j] / total >= cfg.prune_epsilon)
        .collect();

    let mut final_weights = first.weights.clone();
    let mut final_objective = first.objective;
    let mut pruned_accepted = true;
    let mut pruned_history = Vec::new();
    if survivors.len() < m {
        let sub_preds: Vec<Vec<f64>> = survivors.iter().map(|&j| preds[j].clone()).collect();
        let (w, f) = if survivors.len() == 1 {
            (vec![cfg.bounds.1], roc_auc(&sub_preds[0], labels)?)
        } else {
            let seedvec: Vec<f64> = survivors.iter().map(|&j| first.weights[j]).collect();
            let r = differential_evolution(&sub_preds, labels, cfg, &[seedvec], cfg.seed.wrapping_add(1))?;
            pruned_history = r.history;
            (r.weights, r.objective)
        };
        if f >= incumbent - 1e-9 {
            final_weights = vec![0.0; m];
            for (k, &j) in survivors.iter().enumerate() {
                final_weights[j] = w[k];
            }
            final_objective = f;
        } else {
            pruned_accepted = false;
        }
    }
    let report = OptimizationReport {
        uniform_objective,
        member_objectives,
        seeded_objectives,
        pre_prune_weights: first.weights,
        pre_prune_objective: first.objective,
        survivors,
        final_weights: final_weights.clone(),
        final_objective,
        pruned_accepted,
        history: first.history,
        pruned_history,
    };
    Ok((EnsembleModel::new(ens.members.clone(), final_weights)?, report))
}

/// Pools two model families into one ensemble and optimizes its weights.
/// When both families are present, each is optimized on its own first and
/// its weights seed the pooled search, so the pooled result scores at least
/// as well as either family alone.
pub fn combine_families(
    family_a: &[Arc<Model>],
    family_b: &[Arc<Model>],
    valid: &Dataset,
    cfg: &DEConfig,
) -> Result<(EnsembleModel, OptimizationReport)> {
    let members: Vec<Arc<Model>> = family_a.iter().chain(family_b).cloned().collect();
    let pooled = uniform_ensemble(members)?;
    if family_a.is_empty() || family_b.is_empty() {
        return optimize_weights(&pooled, valid, cfg);
    }
    let (na, nb) = (family_a.len(), family_b.len());
    let mut seeds = Vec::with_capacity(2);
    for (fam, offset) in [(family_a, 0), (family_b, na)] {
        let (own, _) = optimize_weights(&uniform_ensemble(fam.to_vec())?, valid, cfg)?;
        let mut w = vec![0.0; na + nb];
        w[offset..offset + fam.len()].copy_from_slice(own.weights());
        seeds.push(w);
    }
    optimize_seeded(&pooled, valid, cfg, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_examples() {
        let p = vec![vec![0.2; 3], vec![0.8; 3]];
        assert_eq!(blend(&p, &[1.0, 1.0]).unwrap(), vec![0.5; 3]);
        let p = vec![vec![0.0], vec![0.4]];
        assert!((blend(&p, &[1.0, 3.0]).unwrap()[0] - 0.3).abs() < 1e-15);
        let p = vec![vec![0.1, 0.7], vec![0.3, 0.2]];
        assert_eq!(blend(&p, &[0.0, 1.0]).unwrap(), p[1]);
        assert_eq!(blend(&p, &[2.0, 2.0]).unwrap(), blend(&p, &[1.0, 1.0]).unwrap());
        assert!(blend(&p, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DEConfig::default().validate().is_ok());
        for bad in [
            DEConfig {
                population_size: Some(3),
                ..DEConfig::default()
            },
            DEConfig {
                mutation_factor: 0.0,
                ..DEConfig::default()
            },
            DEConfig {
                crossover_rate: 1.5,
                ..DEConfig::default()
            },
            DEConfig {
                prune_epsilon: -1.0,
                ..DEConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(DEConfig::default().population_for(3), 30);
        assert_eq!(DEConfig::default().population_for(1), 10);
    }

    fn random_preds(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let preds = (0..m)
            .map(|k| {
                labels
                    .iter()
                    .map(|&y| (0.3 * y as f64 * (k as f64 + 1.0) / m as f64 + rng.random::<f64>() * 0.7).min(1.0))
                    .collect()
            })
            .collect();
        (preds, labels)
    }

    #[test]
    fn search_never_loses_to_seeded_incumbents() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let (preds, labels) = random_preds(&mut rng, 4, 80);
            let cfg = DEConfig {
                max_iterations: 30,
                ..DEConfig::default()
            };
            let r = differential_evolution(&preds, &labels, &cfg, &[], trial).unwrap();
            let uniform = objective(&preds, &[1.0; 4], &labels).unwrap();
            assert!(r.objective >= uniform);
            for p in &preds {
                assert!(r.objective >= roc_auc(p, &labels).unwrap());
            }
            assert!(r.history.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn search_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (preds, labels) = random_preds(&mut rng, 3, 60);
        let cfg = DEConfig {
            max_iterations: 20,
            ..DEConfig::default()
        };
        let a = differential_evolution(&preds, &labels, &cfg, &[], 7).unwrap();
        let b = differential_evolution(&preds, &labels, &cfg, &[], 7).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history, b.history);
    }
}
