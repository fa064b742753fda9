//! End-to-end workflow: teacher, self-distillation generations per family,
//! cross-family weight optimization and a final distillation into a single
//! deployment model.
//!
//! Every component seed is derived from the global seed by a fixed offset,
//! so a config file fully determines every artifact. The test split is only
//! read for reporting.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{denoise, make_targets, run_generations, DistillConfig, GenerationRecord, GenerationRun};
use crate::ensemble::{combine_families, uniform_ensemble, DEConfig, EnsembleModel, OptimizationReport};
use crate::error::{Error, Result};
use crate::learners::{LearnerSpec, Model, MODEL_VERSION};
use crate::metrics::{generation_correlation_matrix, roc_auc, EvalReport};
use crate::synthetic::{generate, SyntheticConfig};
use crate::tabular::{apply_transform, ingest_csv, remove_constant_columns, split, Dataset, SplitSpec, TransformKind};

pub const REPORT_VERSION: u32 = 1;

const SEED_SPLIT: u64 = 0;
const SEED_FAMILY_A_LEARNER: u64 = 1000;
const SEED_FAMILY_A_DISTILL: u64 = 2000;
const SEED_FAMILY_B_LEARNER: u64 = 3000;
const SEED_FAMILY_B_DISTILL: u64 = 4000;
const SEED_ENSEMBLE: u64 = 5000;
const SEED_FINAL: u64 = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, label_column: String },
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.6,
            valid_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Drop features that are constant on the training split.
    pub remove_constant_columns: bool,
    /// Fitted on the training split, applied to every split.
    pub transform: Option<TransformKind>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            remove_constant_columns: true,
            transform: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    /// Used in file names; defaults to the learner kind.
    #[serde(default)]
    pub name: Option<String>,
    pub learner: LearnerSpec,
    #[serde(default)]
    pub distill: DistillConfig,
}

impl FamilyConfig {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.learner.kind().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleStage {
    /// When off, every generation of every family gets weight 1.
    pub optimize: bool,
    pub de: DEConfig,
}

impl Default for EnsembleStage {
    fn default() -> Self {
        EnsembleStage {
            optimize: true,
            de: DEConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalDistillConfig {
    pub learner: LearnerSpec,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_beta() -> f64 {
    0.7
}

fn default_threshold() -> f64 {
    0.99
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Learner and distillation seeds inside the config are replaced by values
/// derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go. Not serialized, so it affects neither the run-id
    /// nor the report.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub family_a: FamilyConfig,
    #[serde(default)]
    pub family_b: Option<FamilyConfig>,
    #[serde(default)]
    pub ensemble: EnsembleStage,
    /// Without it the deployment model is the member with the best
    /// validation AUC.
    #[serde(default)]
    pub final_distill: Option<FinalDistillConfig>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        // relative data paths are resolved against the config file
        if let DataSource::Csv { path: data, .. } = &mut cfg.data {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Csv { path, .. } = &self.data {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
                ));
            }
        }
        self.split_spec().validate()?;
        let mut names = Vec::new();
        for fam in self.families() {
            fam.learner.validate()?;
            fam.distill.validate()?;
            let name = fam.name();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::invalid(format!("family name `{name}` must be alphanumeric")));
            }
            if names.contains(&name) {
                return Err(Error::invalid(format!("two families are named `{name}`; set `name` explicitly")));
            }
            names.push(name);
        }
        self.ensemble.de.validate()?;
        if let Some(f) = &self.final_distill {
            f.learner.validate()?;
            if !(0.0..=1.0).contains(&f.beta) || !(f.threshold > 0.0 && f.threshold <= 1.0) {
                return Err(Error::invalid("final_distill beta must lie in [0, 1] and threshold in (0, 1]"));
            }
        }
        Ok(())
    }

    fn families(&self) -> impl Iterator<Item = &FamilyConfig> {
        std::iter::once(&self.family_a).chain(self.family_b.as_ref())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.split.train_fraction,
            valid_fraction: self.split.valid_fraction,
            seed: self.seed.wrapping_add(SEED_SPLIT),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON config.
    pub fn run_id(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_rows: usize,
    pub valid_rows: usize,
    pub test_rows: usize,
    pub features: usize,
    pub removed_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub name: String,
    pub kind: String,
    pub records: Vec<GenerationRecord>,
    pub model_files: Vec<String>,
    /// Mean Pearson correlation of consecutive generations on test rows;
    /// absent with one generation or constant predictions.
    pub consecutive_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub valid_auc: f64,
    pub optimization: Option<OptimizationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEval {
    pub name: String,
    pub report: EvalReport,
}

/// Test-split metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub teacher: NamedEval,
    pub best_single: NamedEval,
    pub uniform_ensemble: EvalReport,
    pub optimized_ensemble: Option<EvalReport>,
    pub final_model: EvalReport,
    /// Generation 0 of the deployment family.
    pub baseline: String,
    pub gain_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModelReport {
    pub file: String,
    /// `distilled`, or the name of the member chosen on validation AUC.
    pub source: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub model_version: u32,
    pub tool_version: String,
    pub run_id: String,
    pub config: PipelineConfig,
    pub data: DataSummary,
    pub families: Vec<FamilyReport>,
    pub ensemble: EnsembleReport,
    pub final_model: FinalModelReport,
    pub metrics: MetricTable,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A finished run: its report, output directory and in-memory artifacts.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RunReport,
    pub dir: PathBuf,
    pub ensemble: EnsembleModel,
    pub final_model: Arc<Model>,
}

fn load_data(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Csv { path, label_column } => ingest_csv(path, label_column, None),
        DataSource::Synthetic(cfg) => generate(cfg),
    }
}

/// Loads the data, splits it and runs [`run_pipeline_on_splits`].
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let ds = load_data(&cfg.data).map_err(|e| e.at_stage("ingest"))?;
    let (train, valid, test) = split(&ds, &cfg.split_spec()).map_err(|e| e.at_stage("split"))?;
    run_pipeline_on_splits(cfg, &train, &valid, &test)
}

/// Preprocessing decisions and fitted statistics come from `train` only.
fn preprocess(
    cfg: &PreprocessConfig,
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<(Dataset, Dataset, Dataset, Vec<String>)> {
    let (train, removed) = if cfg.remove_constant_columns {
        remove_constant_columns(train)?
    } else {
        (train.clone(), Vec::new())
    };
    let valid = valid.drop_columns(&removed)?;
    let test = test.drop_columns(&removed)?;
    let Some(kind) = cfg.transform else {
        return Ok((train, valid, test, removed));
    };
    let (nt, nv) = (train.n_rows(), valid.n_rows());
    let all = train.concat(&valid)?.concat(&test)?;
    let all = apply_transform(&all, kind, train.row_ids())?;
    let part = |lo: usize, hi: usize| all.select(&(lo..hi).collect::<Vec<_>>());
    Ok((part(0, nt)?, part(nt, nt + nv)?, part(nt + nv, all.n_rows())?, removed))
}

/// Trains a single `target_spec` model on ensemble scores of `train`: rows
/// with `|score - y| >= threshold` are dropped and the rest get β-mixed
/// targets. `valid` is needed by learners with early stopping.
pub fn distill_to_deployment(
    ensemble: &EnsembleModel,
    train: &Dataset,
    valid: Option<&Dataset>,
    target_spec: &LearnerSpec,
    beta: f64,
    threshold: f64,
) -> Result<Model> {
    let scores = ensemble.predict(train)?;
    let (kept, _) = denoise(train, &scores, threshold)?;
    let kept_scores = if kept.n_rows() == train.n_rows() {
        scores
    } else {
        let mut k = 0;
        let mut out = Vec::with_capacity(kept.n_rows());
        for (i, id) in train.row_ids().iter().enumerate() {
            if kept.row_ids().get(k) == Some(id) {
                out.push(scores[i]);
                k += 1;
            }
        }
        out
    };
    let target = make_targets(&kept, &kept_scores, beta)?;
    Model::train(target_spec, &kept, &target, valid)
}

struct FamilyPlan {
    name: String,
    spec: LearnerSpec,
    distill: DistillConfig,
}

fn family_plans(cfg: &PipelineConfig) -> Vec<FamilyPlan> {
    let offsets = [
        (SEED_FAMILY_A_LEARNER, SEED_FAMILY_A_DISTILL),
        (SEED_FAMILY_B_LEARNER, SEED_FAMILY_B_DISTILL),
    ];
    cfg.families()
        .zip(offsets)
        .map(|(fam, (lo, dof))| FamilyPlan {
            name: fam.name(),
            spec: fam.learner.with_seed(cfg.seed.wrapping_add(lo)),
            distill: DistillConfig {
                seed: cfg.seed.wrapping_add(dof),
                ..fam.distill.clone()
            },
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::io::write_atomic(path, text.as_bytes())
}

/// Runs everything after splitting and writes artifacts under
/// `<output_dir>/<run-id>/`.
pub fn run_pipeline_on_splits(
    cfg: &PipelineConfig,
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let run_id = cfg.run_id()?;
    let dir = cfg.output_dir.join(&run_id);
    let models_dir = dir.join("models");

    let (train, valid, test, removed) =
        preprocess(&cfg.preprocess, train, valid, test).map_err(|e| e.at_stage("preprocess"))?;

    // families are independent, so they train side by side
    let plans = family_plans(cfg);
    let results: Vec<Result<GenerationRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .iter()
            .map(|p| s.spawn(|| run_generations(&p.spec, &train, &valid, &test, &p.distill)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("family worker panicked".into()))))
            .collect()
    });

    let mut runs = Vec::new();
    let mut families = Vec::new();
    let mut member_names = Vec::new();
    let mut member_files = Vec::new();
    for ((plan, result), stage) in plans.iter().zip(results).zip(["family_a", "family_b"]) {
        let run = result.map_err(|e| e.at_stage(stage))?;
        let mut files = Vec::new();
        for (g, m) in run.models.iter().enumerate() {
            let file = format!("models/{}_gen{g}.json", plan.name);
            m.save(&dir.join(&file)).map_err(|e| e.at_stage(stage))?;
            member_names.push(format!("{}_gen{g}", plan.name));
            member_files.push(file.clone());
            files.push(file);
        }
        write_text(&dir.join(format!("ledger_{}.csv", plan.name)), &run.ledger_csv())?;
        let refs: Vec<&Model> = run.models.iter().map(|m| m.as_ref()).collect();
        let corr = if refs.len() >= 2 {
            generation_correlation_matrix(&refs, &test).ok()
        } else {
            None
        };
        if let Some(c) = &corr {
            let labels: Vec<String> = (0..refs.len()).map(|g| format!("gen{g}")).collect();
            write_text(&dir.join(format!("correlation_{}.csv", plan.name)), &c.to_csv(&labels))?;
        }
        families.push(FamilyReport {
            name: plan.name.clone(),
            kind: plan.spec.kind().to_string(),
            records: run.records.clone(),
            model_files: files,
            consecutive_correlation: corr.map(|c| c.mean_consecutive()),
        });
        runs.push(run);
    }

    let members: Vec<Arc<Model>> = runs.iter().flat_map(|r| r.models.iter().cloned()).collect();
    let uniform = uniform_ensemble(members.clone()).map_err(|e| e.at_stage("ensemble"))?;
    let (ensemble, optimization) = if cfg.ensemble.optimize {
        let de = DEConfig {
            seed: cfg.seed.wrapping_add(SEED_ENSEMBLE),
            ..cfg.ensemble.de.clone()
        };
        let family_b: &[Arc<Model>] = runs.get(1).map_or(&[], |r| &r.models);
        let (ens, report) =
            combine_families(&runs[0].models, family_b, &valid, &de).map_err(|e| e.at_stage("ensemble"))?;
        write_text(&dir.join("weights_audit.csv"), &report.audit_csv(&member_names))?;
        (ens, Some(report))
    } else {
        (uniform.clone(), None)
    };
    ensemble.save(&dir.join("ensemble.json"), &member_files)?;

    let valid_aucs: Vec<f64> = members
        .iter()
        .map(|m| roc_auc(&m.predict(&valid)?, valid.labels()))
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("ensemble"))?;
    let best = (0..members.len()).fold(0, |b, i| if valid_aucs[i] > valid_aucs[b] { i } else { b });
    let ensemble_valid_auc = roc_auc(&ensemble.predict(&valid)?, valid.labels())?;

    let (final_model, source) = match &cfg.final_distill {
        Some(f) => {
            let spec = f.learner.with_seed(cfg.seed.wrapping_add(SEED_FINAL));
            let valid_arg = spec.needs_validation().then_some(&valid);
            let m = distill_to_deployment(&ensemble, &train, valid_arg, &spec, f.beta, f.threshold)
                .map_err(|e| e.at_stage("final_distill"))?;
            (Arc::new(m), "distilled".to_string())
        }
        None => (members[best].clone(), member_names[best].clone()),
    };
    final_model.save(&models_dir.join("final.json"))?;

    let eval = |scores: Vec<f64>| EvalReport::from_scores(&scores, test.labels());
    let test_eval = || -> Result<MetricTable> {
        let kind = final_model.spec().kind();
        let base_family = families.iter().position(|f| f.kind == kind).unwrap_or(0);
        let base_index: usize = families[..base_family].iter().map(|f| f.records.len()).sum();
        let teacher = eval(members[0].predict(&test)?)?;
        let baseline = eval(members[base_index].predict(&test)?)?;
        let final_report = eval(final_model.predict(&test)?)?;
        Ok(MetricTable {
            teacher: NamedEval {
                name: member_names[0].clone(),
                report: teacher,
            },
            best_single: NamedEval {
                name: member_names[best].clone(),
                report: eval(members[best].predict(&test)?)?,
            },
            uniform_ensemble: eval(uniform.predict(&test)?)?,
            optimized_ensemble: match &optimization {
                Some(_) => Some(eval(ensemble.predict(&test)?)?),
                None => None,
            },
            baseline: member_names[base_index].clone(),
            gain_auc: final_report.auc - baseline.auc,
            final_model: final_report,
        })
    };
    let metrics = test_eval().map_err(|e| e.at_stage("evaluate"))?;

    let report = RunReport {
        report_version: REPORT_VERSION,
        model_version: MODEL_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run_id,
        config: cfg.clone(),
        data: DataSummary {
            train_rows: train.n_rows(),
            valid_rows: valid.n_rows(),
            test_rows: test.n_rows(),
            features: train.n_features(),
            removed_columns: removed,
        },
        families,
        ensemble: EnsembleReport {
            members: member_names,
            weights: ensemble.weights().to_vec(),
            valid_auc: ensemble_valid_auc,
            optimization,
        },
        final_model: FinalModelReport {
            file: "models/final.json".into(),
            source,
            kind: final_model.spec().kind().to_string(),
        },
        metrics,
    };
    write_text(&dir.join("report.json"), &report.to_json()?)?;
    Ok(PipelineRun {
        report,
        dir,
        ensemble,
        final_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[data.synthetic]
rows = 300
[family_a.learner]
kind = "gbdt"
rounds = 10
"#;

    #[test]
    fn config_defaults_fill_in() {
        let cfg = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.split, SplitConfig::default());
        assert!(cfg.ensemble.optimize);
        assert_eq!(cfg.family_a.distill, DistillConfig::default());
        match &cfg.family_a.learner {
            LearnerSpec::Gbdt(p) => {
                assert_eq!(p.rounds, 10);
                assert_eq!(p.max_depth, 6);
            }
            _ => panic!("expected gbdt"),
        }
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[family_b]\nbogus = 1\n");
        assert!(PipelineConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn run_id_tracks_config() {
        let a = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.run_id().unwrap(), b.run_id().unwrap());
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.run_id().unwrap(), b.run_id().unwrap());
        b.seed += 1;
        assert_ne!(a.run_id().unwrap(), b.run_id().unwrap());
        assert_eq!(a.run_id().unwrap().len(), 16);
    }

    #[test]
    fn duplicate_family_names_are_rejected() {
        let text = format!("{MINIMAL}\n[family_b.learner]\nkind = \"gbdt\"\n");
        let cfg = PipelineConfig::from_toml_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_csv_names_path() {
        let text = "[data.csv]\npath = \"/nonexistent/data.csv\"\nlabel_column = \"y\"\n[family_a.learner]\nkind = \"gbdt\"\n";
        let err = PipelineConfig::from_toml_str(text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("/nonexistent/data.csv"));
    }
}
