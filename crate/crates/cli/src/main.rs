use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tabdistill::distill::{run_generations, DistillConfig, TargetMode, TeacherMode};
use tabdistill::ensemble::{optimize_weights, uniform_ensemble, DEConfig, EnsembleModel};
use tabdistill::kdcore::{run_verification, VerifyConfig};
use tabdistill::learners::{LearnerSpec, Model, TrainingTarget};
use tabdistill::metrics::EvalReport;
use tabdistill::pipeline::{distill_to_deployment, run_pipeline, PipelineConfig};
use tabdistill::tabular::{ingest_csv, split, Dataset, Schema, SplitSpec};
use tabdistill::{Error, ErrorCategory};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_VERIFICATION: u8 = 4;

#[derive(Parser)]
#[command(name = "tabdistill", version, about = "Distillation toolkit for tabular binary classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerKind {
    Gbdt,
    Mlp,
}

#[derive(clap::Args)]
struct LearnerArgs {
    /// Learner with default hyperparameters.
    #[arg(long, value_enum, default_value = "gbdt")]
    learner: LearnerKind,
    /// JSON learner spec file (overrides --learner), e.g. containing {"kind":"gbdt","rounds":50}.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Learner seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl LearnerArgs {
    fn resolve(&self) -> Result<LearnerSpec> {
        let spec = match &self.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?
            }
            None => match self.learner {
                LearnerKind::Gbdt => LearnerSpec::gbdt(),
                LearnerKind::Mlp => LearnerSpec::mlp(),
            },
        };
        Ok(match self.seed {
            Some(s) => spec.with_seed(s),
            None => spec,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a CSV file and print its inferred schema.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: String,
        /// Also write the schema document here.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
    /// Train a single model on hard labels.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: String,
        /// Validation CSV for learners with early stopping.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[command(flatten)]
        learner: LearnerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a CSV and run teacher plus self-distillation generations.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        label: String,
        #[command(flatten)]
        learner: LearnerArgs,
        #[arg(long, default_value_t = 5)]
        generations: usize,
        #[arg(long, default_value_t = 0.7)]
        beta: f64,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        #[arg(long)]
        from_ensemble: bool,
        #[arg(long)]
        sampled_labels: bool,
        #[arg(long)]
        include_original: bool,
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        valid_fraction: f64,
        /// Seed for the split and label sampling.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Output directory for models and the ledger.
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize blending weights of persisted models on a validation CSV.
    EnsembleOpt {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0.01)]
        prune_epsilon: f64,
        /// Ensemble document to write; member paths are stored relative to it.
        #[arg(long)]
        out: PathBuf,
        /// Weights audit CSV.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Distill a persisted ensemble into one model.
    DeployDistill {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[command(flatten)]
        learner: LearnerArgs,
        #[arg(long, default_value_t = 0.7)]
        beta: f64,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full workflow described by a TOML config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Numerically check the loss-equivalence and unbiasedness results.
    Verify {
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics of a persisted model on a CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // A closed downstream pipe (e.g. `| head`) is not a failure.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

/// Reads a CSV in the layout of `schema`.
fn ingest_like(path: &Path, schema: &Schema) -> Result<Dataset> {
    Ok(ingest_csv(path, schema.label_column(), Some(schema))?)
}

/// Path of `target` as seen from directory `base`.
fn relative_to(base: &Path, target: &Path) -> String {
    let absolute = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let (base, target) = (absolute(base), absolute(target));
    let shared = base
        .components()
        .zip(target.components())
        .take_while(|(a, b)| a == b)
        .count();
    if shared == 0 {
        return target.to_string_lossy().into_owned();
    }
    let mut rel = PathBuf::new();
    for _ in base.components().skip(shared) {
        rel.push("..");
    }
    for c in target.components().skip(shared) {
        rel.push(c);
    }
    rel.to_string_lossy().into_owned()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, label, schema_out } => {
            let ds = ingest_csv(&data, &label, None)?;
            if let Some(path) = schema_out {
                ds.schema().save(&path)?;
            }
            let columns: Vec<_> = ds
                .schema()
                .features()
                .map(|c| json!({"name": c.name, "kind": c.kind, "categories": c.categories.len()}))
                .collect();
            print_json(&json!({
                "rows": ds.n_rows(),
                "features": ds.n_features(),
                "positives": ds.count_positive(),
                "label_column": label,
                "columns": columns,
                "fingerprint": ds.schema().fingerprint(),
            }))
        }
        Command::Train {
            data,
            label,
            valid,
            learner,
            out,
        } => {
            let spec = learner.resolve()?;
            let train = ingest_csv(&data, &label, None)?;
            let valid = valid.map(|v| ingest_like(&v, train.schema())).transpose()?;
            let model = Model::train(&spec, &train, &TrainingTarget::HardLabels, valid.as_ref())?;
            model.save(&out)?;
            let report = EvalReport::evaluate(&model, &train)?;
            print_json(&json!({"model": out, "kind": spec.kind(), "train": report}))
        }
        Command::Distill {
            data,
            label,
            learner,
            generations,
            beta,
            threshold,
            from_ensemble,
            sampled_labels,
            include_original,
            train_fraction,
            valid_fraction,
            split_seed,
            out,
        } => {
            let spec = learner.resolve()?;
            let ds = ingest_csv(&data, &label, None)?;
            let (train, valid, test) = split(
                &ds,
                &SplitSpec {
                    train_fraction,
                    valid_fraction,
                    seed: split_seed,
                },
            )?;
            let cfg = DistillConfig {
                beta,
                denoise_threshold: threshold,
                generations,
                teacher_mode: if from_ensemble {
                    TeacherMode::FromEnsemble
                } else {
                    TeacherMode::FromLast
                },
                target_mode: if sampled_labels {
                    TargetMode::LabelSampled
                } else {
                    TargetMode::RowWeighted
                },
                include_original,
                seed: split_seed,
                ..DistillConfig::default()
            };
            let run = run_generations(&spec, &train, &valid, &test, &cfg)?;
            let mut files = Vec::new();
            for (g, m) in run.models.iter().enumerate() {
                let path = out.join(format!("gen{g}.json"));
                m.save(&path)?;
                files.push(path);
            }
            tabdistill::io::write_atomic(&out.join("ledger.csv"), run.ledger_csv().as_bytes())?;
            let report = json!({"records": run.records, "models": files});
            tabdistill::io::write_atomic(&out.join("generations.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            print_json(&report)
        }
        Command::EnsembleOpt {
            models,
            valid,
            seed,
            iterations,
            prune_epsilon,
            out,
            audit,
        } => {
            let members: Vec<Arc<Model>> = models
                .iter()
                .map(|p| Model::load(p).map(Arc::new))
                .collect::<tabdistill::Result<_>>()?;
            let valid = ingest_like(&valid, members[0].schema())?;
            let cfg = DEConfig {
                seed,
                max_iterations: iterations,
                prune_epsilon,
                ..DEConfig::default()
            };
            let (ens, report) = optimize_weights(&uniform_ensemble(members)?, &valid, &cfg)?;
            let base = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            std::fs::create_dir_all(base).with_context(|| format!("creating {}", base.display()))?;
            let files: Vec<String> = models.iter().map(|m| relative_to(base, m)).collect();
            ens.save(&out, &files)?;
            if let Some(path) = audit {
                tabdistill::io::write_atomic(&path, report.audit_csv(&files).as_bytes())?;
            }
            print_json(&json!({"ensemble": out, "weights": ens.weights(), "optimization": report}))
        }
        Command::DeployDistill {
            ensemble,
            data,
            valid,
            learner,
            beta,
            threshold,
            out,
        } => {
            let spec = learner.resolve()?;
            let ens = EnsembleModel::load(&ensemble)?;
            let schema = ens.members()[0].schema().clone();
            let train = ingest_like(&data, &schema)?;
            let valid = valid.map(|v| ingest_like(&v, &schema)).transpose()?;
            let model = distill_to_deployment(&ens, &train, valid.as_ref(), &spec, beta, threshold)?;
            model.save(&out)?;
            print_json(&json!({"model": out, "kind": spec.kind(), "train": EvalReport::evaluate(&model, &train)?}))
        }
        Command::Pipeline {
            config,
            output_dir,
            seed,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = run_pipeline(&cfg)?;
            print_json(&json!({
                "run_dir": run.dir,
                "run_id": run.report.run_id,
                "metrics": run.report.metrics,
            }))
        }
        Command::Verify { seed, out } => {
            let mut cfg = VerifyConfig::default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_verification(&cfg)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                tabdistill::io::write_atomic(&path, text.as_bytes())?;
            }
            println!("{text}");
            if !report.all_pass {
                return Err(Error::Verification("at least one check failed".into()).into());
            }
            Ok(())
        }
        Command::Evaluate { model, data } => {
            let model = Model::load(&model)?;
            let ds = ingest_like(&data, model.schema())?;
            print_json(&serde_json::to_value(EvalReport::evaluate(&model, &ds)?)?)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::category) {
        Some(ErrorCategory::Usage) => EXIT_USAGE,
        Some(ErrorCategory::Data) => EXIT_DATA,
        Some(ErrorCategory::Training) => EXIT_TRAINING,
        Some(ErrorCategory::Verification) => EXIT_VERIFICATION,
        None if err.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their source in the message.
            if e.downcast_ref::<Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
