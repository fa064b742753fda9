//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p tabdistill --test acceptance`.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabdistill::distill::{denoise, make_targets, run_generations, DistillConfig, TeacherMode};
use tabdistill::ensemble::{optimize_weights, uniform_ensemble, DEConfig};
use tabdistill::kdcore::{
    check_loss_identity, check_sampling_unbiasedness, verify_gradient_unbiasedness, KdInstance, KdSetup, LinearSoftmax,
};
use tabdistill::learners::{GbdtParams, LearnerSpec, MlpParams, Model, TrainingTarget};
use tabdistill::metrics::{generation_correlation_matrix, roc_auc};
use tabdistill::pipeline::{run_pipeline, PipelineConfig};
use tabdistill::synthetic::{generate, SyntheticConfig};
use tabdistill::tabular::{split, Column, Dataset, FeatureKind, SplitSpec};

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn splits(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset), String> {
    split(
        ds,
        &SplitSpec {
            train_fraction: 0.6,
            valid_fraction: 0.2,
            seed,
        },
    )
    .map_err(err)
}

fn gbdt(seed: u64) -> LearnerSpec {
    LearnerSpec::Gbdt(GbdtParams {
        seed,
        ..GbdtParams::default()
    })
}

/// Quadratic pair-counting AUC, ties count one half.
fn pair_counting_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn loss_identity() -> Outcome {
    let r = check_loss_identity(100, 50, 5, 1).map_err(err)?;
    verdict(
        r.pass && r.instances >= 100,
        format!("{} instances, max relative gap {:.2e}", r.instances, r.max_relative_gap),
    )
}

fn sampling_unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for t in 0..10 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let alpha = rng.random::<f64>();
        let inst = KdInstance::random(&mut rng, n, k, alpha).map_err(err)?;
        let r = check_sampling_unbiasedness(&inst, 200_000, 100 + t, 3.0).map_err(err)?;
        worst = worst.max(r.z_score);
    }
    verdict(worst <= 3.0, format!("10 instances x 200000 resamples, max |z| {worst:.2}"))
}

fn gradient_unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let setup = KdSetup::random(&mut rng, 20, 3, 3, 0.5).map_err(err)?;
    let scorer = LinearSoftmax::random(&mut rng, 3, 3, 0.5);
    let r = verify_gradient_unbiasedness(&scorer, &setup, 500_000, 4).map_err(err)?;
    verdict(
        r.max_abs_z <= 4.0 && r.mean_gradient.len() == 9,
        format!("{} components, max |z| {:.2}", r.mean_gradient.len(), r.max_abs_z),
    )
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 500 {
        let n = rng.random_range(2..=200);
        // coarse levels inject ties in roughly half the instances
        let levels = if rng.random::<bool>() { rng.random_range(2..=10) } else { 0 };
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let u = rng.random::<f64>();
                if levels > 0 {
                    (u * levels as f64).floor() / levels as f64
                } else {
                    u
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random::<bool>() as u8).collect();
        if labels.iter().all(|&y| y == labels[0]) {
            continue;
        }
        let fast = roc_auc(&scores, &labels).map_err(err)?;
        let oracle = pair_counting_auc(&scores, &labels);
        if fast != oracle {
            return Err(format!("instance {checked}: rank AUC {fast} vs pair counting {oracle}"));
        }
        checked += 1;
    }
    Ok("500 instances identical".into())
}

fn weights(target: &TrainingTarget) -> (Vec<f64>, Vec<f64>) {
    match target {
        TrainingTarget::RowWeighted { positive, negative } => (positive.clone(), negative.clone()),
        _ => unreachable!("make_targets returns row weights"),
    }
}

fn beta_boundaries() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = generate(&SyntheticConfig {
        rows: 500,
        seed: 5,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let scores: Vec<f64> = (0..ds.n_rows()).map(|_| rng.random::<f64>()).collect();
    let (p0, n0) = weights(&make_targets(&ds, &scores, 0.0).map_err(err)?);
    let hard = ds.labels().iter().enumerate().all(|(i, &y)| p0[i] == y as f64 && n0[i] == 1.0 - y as f64);
    let (p1, n1) = weights(&make_targets(&ds, &scores, 1.0).map_err(err)?);
    let teacher = scores.iter().enumerate().all(|(i, &f)| p1[i] == f && n1[i] == 1.0 - f);
    let one = Dataset::new(ds.schema().clone(), ds.row(0).to_vec(), vec![1], vec![0]).map_err(err)?;
    let (p, n) = weights(&make_targets(&one, &[0.6], 0.7).map_err(err)?);
    let example = p[0] == 0.72 && n[0] == 0.28;
    verdict(
        hard && teacher && example,
        format!("beta=0 hard labels {hard}, beta=1 teacher weights {teacher}, (0.72, 0.28) {example}"),
    )
}

fn denoise_boundary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ds = generate(&SyntheticConfig {
        rows: 300,
        seed: 6,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    for trial in 0..50 {
        // saturated scores included, since those are the edge of |f - y| < 1
        let scores: Vec<f64> = (0..ds.n_rows())
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let (all, dropped) = denoise(&ds, &scores, 1.0).map_err(err)?;
        if all.n_rows() != ds.n_rows() || !dropped.is_empty() {
            return Err(format!("trial {trial}: threshold 1 dropped {} rows", dropped.len()));
        }
        let mut thresholds: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..1.0)).collect();
        thresholds.sort_by(f64::total_cmp);
        let mut previous: Option<Vec<u64>> = None;
        for t in thresholds {
            let kept = match denoise(&ds, &scores, t) {
                Ok((kept, _)) => kept.row_ids().to_vec(),
                Err(tabdistill::Error::AllRowsDropped { .. }) => Vec::new(),
                Err(e) => return Err(e.to_string()),
            };
            if let Some(prev) = &previous {
                if !prev.iter().all(|id| kept.contains(id)) {
                    return Err(format!("trial {trial}: kept set shrank when threshold rose to {t}"));
                }
            }
            previous = Some(kept);
        }
    }
    Ok("50 random score sets: threshold 1 keeps all, kept sets nested".into())
}

fn append_ones(ds: &Dataset, count: usize) -> Result<Dataset, String> {
    let ones = vec![1.0; ds.n_rows()];
    let mut out = ds.clone();
    for c in 0..count {
        out = out
            .with_column(Column::new(format!("const_{c}"), FeatureKind::Float), &ones)
            .map_err(err)?;
    }
    Ok(out)
}

fn constant_columns() -> Outcome {
    let ds = generate(&SyntheticConfig {
        rows: 2000,
        seed: 7,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let (train, _, test) = splits(&ds, 7)?;
    let plain = Model::train(&gbdt(7), &train, &TrainingTarget::HardLabels, None).map_err(err)?;
    let padded = Model::train(&gbdt(7), &append_ones(&train, 5)?, &TrainingTarget::HardLabels, None).map_err(err)?;
    let a = plain.predict(&test).map_err(err)?;
    let b = padded.predict(&append_ones(&test, 5)?).map_err(err)?;
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    verdict(same, format!("{} test predictions bit-identical: {same}", a.len()))
}

fn cube_plus_identity(ds: &Dataset) -> Result<Dataset, String> {
    let features = ds.features().iter().map(|&x| x * x * x + x).collect();
    Dataset::new(ds.schema().clone(), features, ds.labels().to_vec(), ds.row_ids().to_vec()).map_err(err)
}

fn monotone_transform() -> Outcome {
    let ds = generate(&SyntheticConfig {
        rows: 2000,
        seed: 8,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    if ds.schema().features().any(|c| c.kind != FeatureKind::Float) {
        return Err("synthetic data should be all float".into());
    }
    let (train, _, test) = splits(&ds, 8)?;
    let a = Model::train(&gbdt(8), &train, &TrainingTarget::HardLabels, None)
        .and_then(|m| m.predict(&test))
        .map_err(err)?;
    let (train_t, test_t) = (cube_plus_identity(&train)?, cube_plus_identity(&test)?);
    let b = Model::train(&gbdt(8), &train_t, &TrainingTarget::HardLabels, None)
        .and_then(|m| m.predict(&test_t))
        .map_err(err)?;
    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    verdict(same, format!("{} test predictions bit-identical: {same}", a.len()))
}

fn denoising_trend() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let ds = generate(&SyntheticConfig {
            rows: 5000,
            flip_rate: 0.2,
            seed,
            ..SyntheticConfig::default()
        })
        .map_err(err)?;
        let (train, valid, test) = splits(&ds, seed)?;
        let cfg = DistillConfig {
            generations: 1,
            beta: 0.7,
            denoise_threshold: 0.99,
            seed,
            ..DistillConfig::default()
        };
        let run = run_generations(&gbdt(seed), &train, &valid, &test, &cfg).map_err(err)?;
        let (teacher, student) = (run.records[0].individual.auc, run.records[1].individual.auc);
        if student > teacher {
            wins += 1;
        }
        lines.push(format!("{:+.4}", student - teacher));
    }
    verdict(wins >= 8, format!("student beats teacher in {wins}/10 seeds (AUC deltas {})", lines.join(" ")))
}

fn ensembling_trend() -> Outcome {
    let (mut not_worse, mut larger_gain) = (0, 0);
    for seed in 0..10u64 {
        let ds = generate(&SyntheticConfig {
            rows: 1000,
            flip_rate: 0.1,
            seed,
            ..SyntheticConfig::default()
        })
        .map_err(err)?;
        let (train, valid, test) = splits(&ds, seed)?;
        let cfg = DistillConfig {
            generations: 5,
            beta: 0.7,
            teacher_mode: TeacherMode::FromLast,
            seed,
            ..DistillConfig::default()
        };
        let mlp = LearnerSpec::Mlp(MlpParams {
            batch_size: 16,
            seed,
            ..MlpParams::default()
        });
        let m = run_generations(&mlp, &train, &valid, &test, &cfg).map_err(err)?;
        let g = run_generations(&gbdt(seed), &train, &valid, &test, &cfg).map_err(err)?;
        let (m0, m5) = (m.records[0].individual.auc, m.records[5].ensemble.auc);
        let (g0, g5) = (g.records[0].individual.auc, g.records[5].ensemble.auc);
        if m5 >= m0 {
            not_worse += 1;
        }
        if (m5 - m0) / m0 > (g5 - g0) / g0 {
            larger_gain += 1;
        }
    }
    verdict(
        not_worse >= 8 && larger_gain >= 7,
        format!("ensemble >= gen 0 in {not_worse}/10 (need 8), MLP gain > GBDT gain in {larger_gain}/10 (need 7)"),
    )
}

fn diversity() -> Outcome {
    let ds = generate(&SyntheticConfig {
        rows: 1000,
        flip_rate: 0.1,
        seed: 0,
        ..SyntheticConfig::default()
    })
    .map_err(err)?;
    let mut wins = 0;
    for seed in 0..10u64 {
        let (train, valid, test) = splits(&ds, seed)?;
        let cfg = DistillConfig {
            generations: 2,
            seed,
            ..DistillConfig::default()
        };
        let mlp = LearnerSpec::Mlp(MlpParams {
            batch_size: 16,
            seed: seed * 100,
            ..MlpParams::default()
        });
        let mut corr = Vec::new();
        for spec in [gbdt(seed), mlp] {
            let run = run_generations(&spec, &train, &valid, &test, &cfg).map_err(err)?;
            let models: Vec<&Model> = run.models.iter().map(|m| m.as_ref()).collect();
            corr.push(generation_correlation_matrix(&models, &test).map_err(err)?.mean_consecutive());
        }
        if corr[0] > corr[1] {
            wins += 1;
        }
    }
    verdict(wins >= 8, format!("GBDT consecutive correlation higher in {wins}/10 seeds"))
}

fn weight_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = f64::INFINITY;
    for set in 0..20u64 {
        let ds = generate(&SyntheticConfig {
            rows: 600,
            flip_rate: rng.random_range(0.0..0.3),
            seed: 1200 + set,
            ..SyntheticConfig::default()
        })
        .map_err(err)?;
        let (train, valid, _) = splits(&ds, set)?;
        let members = rng.random_range(2..=5);
        let mut models = Vec::new();
        for m in 0..members {
            let spec = if rng.random_range(0..4) == 0 {
                LearnerSpec::Mlp(MlpParams {
                    epochs: 20,
                    batch_size: 32,
                    seed: set * 10 + m,
                    ..MlpParams::default()
                })
            } else {
                LearnerSpec::Gbdt(GbdtParams {
                    rounds: rng.random_range(5..=60),
                    max_depth: rng.random_range(1..=6),
                    seed: set * 10 + m,
                    ..GbdtParams::default()
                })
            };
            let v = spec.needs_validation().then_some(&valid);
            models.push(Arc::new(
                Model::train(&spec, &train, &TrainingTarget::HardLabels, v).map_err(err)?,
            ));
        }
        let uniform = uniform_ensemble(models.clone()).map_err(err)?;
        let mut floor = roc_auc(&uniform.predict(&valid).map_err(err)?, valid.labels()).map_err(err)?;
        for m in &models {
            floor = floor.max(roc_auc(&m.predict(&valid).map_err(err)?, valid.labels()).map_err(err)?);
        }
        let de = DEConfig {
            seed: set,
            ..DEConfig::default()
        };
        let (optimized, _) = optimize_weights(&uniform, &valid, &de).map_err(err)?;
        let auc = roc_auc(&optimized.predict(&valid).map_err(err)?, valid.labels()).map_err(err)?;
        worst = worst.min(auc - floor);
        if auc < floor - 1e-9 {
            return Err(format!("set {set}: optimized AUC {auc} below floor {floor}"));
        }
    }
    Ok(format!("20 member sets, smallest margin over the floor {worst:+.2e}"))
}

fn deployment() -> Outcome {
    let out = tempfile::tempdir().map_err(err)?;
    let mut ok = 0;
    let mut gaps = Vec::new();
    for seed in 0..10u64 {
        let text = format!(
            "seed = {seed}\n[data.synthetic]\nrows = 10000\nflip_rate = 0.1\nseed = {seed}\n\
             [family_a.learner]\nkind = \"gbdt\"\n[family_b.learner]\nkind = \"mlp\"\n\
             [final_distill.learner]\nkind = \"gbdt\"\n"
        );
        let mut cfg = PipelineConfig::from_toml_str(&text).map_err(err)?;
        cfg.output_dir = out.path().to_path_buf();
        let run = run_pipeline(&cfg).map_err(err)?;
        let m = &run.report.metrics;
        let ens = m.optimized_ensemble.as_ref().ok_or("ensemble was not optimized")?.auc;
        let gap = m.final_model.auc - ens;
        if gap.abs() <= 0.01 {
            ok += 1;
        }
        gaps.push(format!("{gap:+.4}"));
    }
    verdict(ok >= 8, format!("final within 0.01 of ensemble in {ok}/10 seeds (gaps {})", gaps.join(" ")))
}

fn determinism() -> Outcome {
    let text = "seed = 11\n[data.synthetic]\nrows = 800\nflip_rate = 0.1\n\
                [family_a.learner]\nkind = \"gbdt\"\nrounds = 30\n[family_a.distill]\ngenerations = 2\n\
                [family_b.learner]\nkind = \"mlp\"\nepochs = 30\nbatch_size = 32\n[family_b.distill]\ngenerations = 2\n\
                [final_distill.learner]\nkind = \"gbdt\"\nrounds = 30\n";
    let mut reports = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().map_err(err)?;
        let mut cfg = PipelineConfig::from_toml_str(text).map_err(err)?;
        cfg.output_dir = out.path().to_path_buf();
        let run = run_pipeline(&cfg).map_err(err)?;
        reports.push(std::fs::read(run.dir.join("report.json")).map_err(err)?);
    }
    verdict(
        reports[0] == reports[1],
        format!("two runs, report.json {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]),
    )
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "AC-1", title: "loss-equivalence identity", limit: Some(Duration::from_secs(1)), run: loss_identity },
    Criterion { id: "AC-2", title: "sampled loss is unbiased", limit: Some(Duration::from_secs(30)), run: sampling_unbiasedness },
    Criterion { id: "AC-3", title: "sampled gradient is unbiased", limit: Some(Duration::from_secs(60)), run: gradient_unbiasedness },
    Criterion { id: "AC-4", title: "rank AUC equals pair-counting oracle", limit: Some(Duration::from_secs(5)), run: auc_oracle },
    Criterion { id: "AC-5", title: "beta-mix boundaries", limit: None, run: beta_boundaries },
    Criterion { id: "AC-6", title: "denoise threshold boundary", limit: None, run: denoise_boundary },
    Criterion { id: "AC-7", title: "GBDT ignores constant columns", limit: None, run: constant_columns },
    Criterion { id: "AC-8", title: "GBDT monotone-transform invariance", limit: None, run: monotone_transform },
    Criterion { id: "AC-9", title: "denoising trend", limit: Some(Duration::from_secs(120)), run: denoising_trend },
    Criterion { id: "AC-10", title: "ensembling trend", limit: Some(Duration::from_secs(300)), run: ensembling_trend },
    Criterion { id: "AC-11", title: "generation diversity", limit: None, run: diversity },
    Criterion { id: "AC-12", title: "optimized weights never lose", limit: None, run: weight_guarantee },
    Criterion { id: "AC-13", title: "deployment distillation", limit: Some(Duration::from_secs(600)), run: deployment },
    Criterion { id: "AC-14", title: "pipeline determinism", limit: None, run: determinism },
];

fn main() {
    let mut failures = 0;
    for c in CRITERIA {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(limit)) if elapsed > limit => Err(format!("{d}; exceeded {:.0} s limit", limit.as_secs_f64())),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failures += 1;
        }
        println!("[{tag}] {} {}: {detail} ({:.2} s)", c.id, c.title, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failures, CRITERIA.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
