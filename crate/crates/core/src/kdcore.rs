//! k-class distillation losses and the machinery that checks their
//! equivalences numerically.
//!
//! Classes are 0-based here (`0..k`); for `k = 2`, class 1 is the positive
//! class so binary labels map directly.
//!
//! * `kd_loss` is `Σ_i α·CE(q_i, p_i) + (1-α)·CE(1_{y_i}, p_i)`.
//! * `weighted_loss` expands every row into `k` weighted pairs `(x_i, j)` with
//!   weight `q'_i(j) = α q_i(j) + (1-α) 1{j = y_i}`; it equals `kd_loss`.
//! * `sampled_loss` replaces the `k` pairs by one label drawn from `q'_i`; its
//!   expectation equals `kd_loss`, and per-draw gradients are unbiased for
//!   `(1/N) ∇ kd_loss`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::clamp_prob;

const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over `k` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftDistribution(Vec<f64>);

impl SoftDistribution {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::invalid("distribution over zero classes"));
        }
        if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("distribution has a negative or non-finite entry: {q:?}")));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("distribution sums to {total}, not 1")));
        }
        Ok(SoftDistribution(q))
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        check_class(class, k)?;
        let mut q = vec![0.0; k];
        q[class] = 1.0;
        Ok(SoftDistribution(q))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(Error::invalid(format!("class {class} out of range for k = {k}")));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// `-Σ_j q_j ln p_j`, with `p_j` clamped away from 0 and 1.
pub fn cross_entropy(q: &SoftDistribution, p: &SoftDistribution) -> Result<f64> {
    if q.k() != p.k() {
        return Err(Error::LengthMismatch {
            expected: q.k(),
            found: p.k(),
        });
    }
    Ok(q.0
        .iter()
        .zip(&p.0)
        .filter(|(&qj, _)| qj != 0.0)
        .map(|(&qj, &pj)| -qj * clamp_prob(pj).ln())
        .sum())
}

fn hard_cross_entropy(class: usize, p: &SoftDistribution) -> f64 {
    -clamp_prob(p.0[class]).ln()
}

/// `ε·u + (1-ε)·1_y`.
pub fn smooth_label(class: usize, k: usize, epsilon: f64) -> Result<SoftDistribution> {
    check_class(class, k)?;
    check_unit("epsilon", epsilon)?;
    let base = epsilon / k as f64;
    let mut q = vec![base; k];
    q[class] = (1.0 - epsilon) + base;
    SoftDistribution::new(q)
}

/// `α·q + (1-α)·1_y`.
pub fn mixed_target(q: &SoftDistribution, class: usize, alpha: f64) -> Result<SoftDistribution> {
    check_class(class, q.k())?;
    check_unit("alpha", alpha)?;
    let mixed = q
        .0
        .iter()
        .enumerate()
        .map(|(j, &qj)| alpha * qj + (1.0 - alpha) * if j == class { 1.0 } else { 0.0 })
        .collect();
    SoftDistribution::new(mixed)
}

/// Teacher and student distributions, hard labels and the mixing weight α
/// for `N` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdInstance {
    teacher: Vec<SoftDistribution>,
    student: Vec<SoftDistribution>,
    labels: Vec<usize>,
    alpha: f64,
}

impl KdInstance {
    pub fn new(
        teacher: Vec<SoftDistribution>,
        student: Vec<SoftDistribution>,
        labels: Vec<usize>,
        alpha: f64,
    ) -> Result<Self> {
        check_unit("alpha", alpha)?;
        let n = labels.len();
        if n == 0 {
            return Err(Error::invalid("instance with no rows"));
        }
        for len in [teacher.len(), student.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, found: len });
            }
        }
        let k = teacher[0].k();
        for d in teacher.iter().chain(&student) {
            if d.k() != k {
                return Err(Error::LengthMismatch { expected: k, found: d.k() });
            }
        }
        for &y in &labels {
            check_class(y, k)?;
        }
        Ok(KdInstance {
            teacher,
            student,
            labels,
            alpha,
        })
    }

    /// Random instance: teacher and student from a symmetric Dirichlet(1),
    /// labels uniform.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, alpha: f64) -> Result<Self> {
        let teacher = (0..n).map(|_| dirichlet_one(rng, k)).collect::<Result<Vec<_>>>()?;
        let student = (0..n).map(|_| dirichlet_one(rng, k)).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        Self::new(teacher, student, labels, alpha)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.teacher[0].k()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn teacher(&self) -> &[SoftDistribution] {
        &self.teacher
    }

    pub fn student(&self) -> &[SoftDistribution] {
        &self.student
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mixed_targets(&self) -> Result<Vec<SoftDistribution>> {
        self.teacher
            .iter()
            .zip(&self.labels)
            .map(|(q, &y)| mixed_target(q, y, self.alpha))
            .collect()
    }
}

fn dirichlet_one<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Result<SoftDistribution> {
    let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    SoftDistribution::new(draws.into_iter().map(|v| v / total).collect())
}

pub fn kd_loss(inst: &KdInstance) -> Result<f64> {
    let a = inst.alpha;
    let mut total = 0.0;
    for ((q, p), &y) in inst.teacher.iter().zip(&inst.student).zip(&inst.labels) {
        total += a * cross_entropy(q, p)? + (1.0 - a) * hard_cross_entropy(y, p);
    }
    Ok(total)
}

pub fn weighted_loss(inst: &KdInstance) -> Result<f64> {
    let mut total = 0.0;
    for (q_mixed, p) in inst.mixed_targets()?.iter().zip(&inst.student) {
        for (j, &w) in q_mixed.0.iter().enumerate() {
            if w != 0.0 {
                total += w * hard_cross_entropy(j, p);
            }
        }
    }
    Ok(total)
}

/// Inverse-CDF sampler over the rows' mixed targets.
#[derive(Debug, Clone)]
pub struct LabelSampler {
    cumulative: Vec<Vec<f64>>,
}

impl LabelSampler {
    pub fn new(targets: &[SoftDistribution]) -> Self {
        let cumulative = targets
            .iter()
            .map(|q| {
                let mut acc = 0.0;
                q.0.iter()
                    .map(|&v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect();
        LabelSampler { cumulative }
    }

    pub fn draw_row<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        let cdf = &self.cumulative[row];
        let u: f64 = rng.random();
        match cdf.iter().position(|&c| u < c) {
            Some(j) => j,
            // rounding left the total just below u; take the last class with mass
            None => cdf
                .iter()
                .enumerate()
                .rev()
                .find(|(j, &c)| *j == 0 || c > cdf[j - 1])
                .map(|(j, _)| j)
                .unwrap_or(0),
        }
    }

    pub fn draw_all<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<usize>) {
        out.clear();
        out.extend((0..self.cumulative.len()).map(|i| self.draw_row(i, rng)));
    }
}

/// One label per row, `z_i ~ Categorical(q'_i)`.
pub fn sample_labels(inst: &KdInstance, seed: u64) -> Result<Vec<usize>> {
    let sampler = LabelSampler::new(&inst.mixed_targets()?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(inst.n());
    sampler.draw_all(&mut rng, &mut z);
    Ok(z)
}

pub fn sampled_loss(inst: &KdInstance, z: &[usize]) -> Result<f64> {
    if z.len() != inst.n() {
        return Err(Error::LengthMismatch {
            expected: inst.n(),
            found: z.len(),
        });
    }
    let mut total = 0.0;
    for (&zi, p) in z.iter().zip(&inst.student) {
        check_class(zi, p.k())?;
        total += hard_cross_entropy(zi, p);
    }
    Ok(total)
}

/// Monte-Carlo comparison of `E[sampled_loss]` with `kd_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub resamples: usize,
    pub kd_loss: f64,
    pub mean_sampled_loss: f64,
    pub standard_error: f64,
    /// `|mean - kd_loss| / standard_error`
    pub z_score: f64,
    pub pass: bool,
}

pub fn check_sampling_unbiasedness(inst: &KdInstance, resamples: usize, seed: u64, sigmas: f64) -> Result<SamplingReport> {
    if resamples < 2 {
        return Err(Error::invalid("need at least two resamples"));
    }
    let target = kd_loss(inst)?;
    let sampler = LabelSampler::new(&inst.mixed_targets()?);
    // per-row, per-class losses, so each resample is a table lookup
    let losses: Vec<Vec<f64>> = inst
        .student
        .iter()
        .map(|p| (0..p.k()).map(|j| hard_cross_entropy(j, p)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..resamples {
        let mut l = 0.0;
        for (i, row) in losses.iter().enumerate() {
            l += row[sampler.draw_row(i, &mut rng)];
        }
        sum += l;
        sum_sq += l * l;
    }
    let m = resamples as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    let se = (var / m).sqrt();
    let diff = (mean - target).abs();
    let (z, pass) = if se > 0.0 {
        (diff / se, diff <= sigmas * se)
    } else {
        (0.0, diff <= 1e-9 * (1.0 + target.abs()))
    };
    Ok(SamplingReport {
        resamples,
        kd_loss: target,
        mean_sampled_loss: mean,
        standard_error: se,
        z_score: z,
        pass,
    })
}

/// A scorer with closed-form gradients of the cross-entropy to any target
/// distribution.
pub trait DifferentiableScorer {
    fn n_params(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn probs(&self, x: &[f64]) -> Vec<f64>;
    /// Gradient of `CE(target, probs(x))` with respect to the parameters.
    fn ce_gradient(&self, x: &[f64], target: &[f64]) -> Vec<f64>;
}

/// `p = softmax(Θ x)` with `Θ ∈ R^{k×d}` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmax {
    pub k: usize,
    pub d: usize,
    pub theta: Vec<f64>,
}

impl LinearSoftmax {
    pub fn zeros(k: usize, d: usize) -> Self {
        LinearSoftmax { k, d, theta: vec![0.0; k * d] }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, scale: f64) -> Self {
        let theta = (0..k * d)
            .map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z })
            .collect();
        LinearSoftmax { k, d, theta }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl DifferentiableScorer for LinearSoftmax {
    fn n_params(&self) -> usize {
        self.k * self.d
    }

    fn n_classes(&self) -> usize {
        self.k
    }

    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .theta
            .chunks(self.d)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        softmax(&logits)
    }

    fn ce_gradient(&self, x: &[f64], target: &[f64]) -> Vec<f64> {
        // d/dz_c CE(t, softmax z) = p_c Σt - t_c
        let p = self.probs(x);
        let mass: f64 = target.iter().sum();
        let mut g = Vec::with_capacity(self.k * self.d);
        for c in 0..self.k {
            let dz = p[c] * mass - target[c];
            g.extend(x.iter().map(|xv| dz * xv));
        }
        g
    }
}

/// Feature rows with teacher distributions, labels and α: the data half of a
/// KD problem whose student side comes from a scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdSetup {
    pub features: Vec<Vec<f64>>,
    pub teacher: Vec<SoftDistribution>,
    pub labels: Vec<usize>,
    pub alpha: f64,
}

impl KdSetup {
    /// Gaussian features, Dirichlet(1) teachers, uniform labels.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize, k: usize, alpha: f64) -> Result<Self> {
        let features = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let teacher = (0..n).map(|_| dirichlet_one(rng, k)).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        Ok(KdSetup {
            features,
            teacher,
            labels,
            alpha,
        })
    }

    pub fn instance<S: DifferentiableScorer>(&self, scorer: &S) -> Result<KdInstance> {
        let student = self
            .features
            .iter()
            .map(|x| SoftDistribution::new(scorer.probs(x)))
            .collect::<Result<Vec<_>>>()?;
        KdInstance::new(self.teacher.clone(), student, self.labels.clone(), self.alpha)
    }
}

/// Analytic `∇ L_kd`: α times the teacher-matching gradient plus (1-α)
/// times the hard-label gradient, summed over rows.
pub fn kd_gradient<S: DifferentiableScorer>(scorer: &S, data: &KdSetup) -> Result<Vec<f64>> {
    let k = scorer.n_classes();
    let mut total = vec![0.0; scorer.n_params()];
    for ((x, q), &y) in data.features.iter().zip(&data.teacher).zip(&data.labels) {
        let soft = scorer.ce_gradient(x, q.probs());
        let hard = scorer.ce_gradient(x, SoftDistribution::one_hot(k, y)?.probs());
        for ((t, s), h) in total.iter_mut().zip(soft).zip(hard) {
            *t += data.alpha * s + (1.0 - data.alpha) * h;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub samples: usize,
    pub mean_gradient: Vec<f64>,
    /// `(1/N) ∇ L_kd`
    pub analytic_gradient: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub max_abs_z: f64,
    pub sigmas: f64,
    /// Every component within `sigmas` standard errors. Not meaningful for
    /// very small `samples`.
    pub pass: bool,
}

/// Draws `I` uniformly, `z_I ~ q'_I`, and averages `∇ CE(z_I, p_I)` over
/// `samples` draws; compares with `(1/N) ∇ L_kd` componentwise.
pub fn verify_gradient_unbiasedness<S: DifferentiableScorer>(
    scorer: &S,
    data: &KdSetup,
    samples: usize,
    seed: u64,
) -> Result<GradientReport> {
    const SIGMAS: f64 = 4.0;
    if samples == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let n = data.features.len();
    let k = scorer.n_classes();
    let inst = data.instance(scorer)?;
    let sampler = LabelSampler::new(&inst.mixed_targets()?);
    let mut analytic = kd_gradient(scorer, data)?;
    for g in &mut analytic {
        *g /= n as f64;
    }

    // per-row, per-class gradients are fixed; draws only pick among them
    let table: Vec<Vec<Vec<f64>>> = data
        .features
        .iter()
        .map(|x| {
            (0..k)
                .map(|j| {
                    let onehot = SoftDistribution::one_hot(k, j).expect("class in range");
                    scorer.ce_gradient(x, onehot.probs())
                })
                .collect()
        })
        .collect();

    let dim = scorer.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for _ in 0..samples {
        let i = rng.random_range(0..n);
        let z = sampler.draw_row(i, &mut rng);
        for (c, &g) in table[i][z].iter().enumerate() {
            sum[c] += g;
            sum_sq[c] += g * g;
        }
    }
    let m = samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    if mean.iter().chain(&analytic).any(|v| !v.is_finite()) {
        return Err(Error::Verification("non-finite gradient".into()));
    }
    let se: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| {
            if samples < 2 {
                return 0.0;
            }
            let var = ((sq - m * mu * mu) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    let mut max_z: f64 = 0.0;
    let mut pass = true;
    for c in 0..dim {
        let diff = (mean[c] - analytic[c]).abs();
        if se[c] > 0.0 {
            max_z = max_z.max(diff / se[c]);
            pass &= diff <= SIGMAS * se[c];
        } else {
            pass &= diff <= 1e-12 * (1.0 + analytic[c].abs());
        }
    }
    Ok(GradientReport {
        samples,
        mean_gradient: mean,
        analytic_gradient: analytic,
        standard_errors: se,
        max_abs_z: max_z,
        sigmas: SIGMAS,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub instances: usize,
    pub max_relative_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `weighted_loss == kd_loss` over random instances with `N ≤ max_n`,
/// `k ≤ max_k` and α uniform in [0, 1].
pub fn check_loss_identity(instances: usize, max_n: usize, max_k: usize, seed: u64) -> Result<IdentityReport> {
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=max_n);
        let k = rng.random_range(2..=max_k.max(2));
        let alpha = rng.random::<f64>();
        let inst = KdInstance::random(&mut rng, n, k, alpha)?;
        let kd = kd_loss(&inst)?;
        let wl = weighted_loss(&inst)?;
        worst = worst.max((wl - kd).abs() / (1.0 + kd.abs()));
    }
    Ok(IdentityReport {
        instances,
        max_relative_gap: worst,
        tolerance: TOL,
        pass: worst <= TOL,
    })
}

/// Settings for the bundled verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub identity_instances: usize,
    pub sampling_instances: usize,
    pub resamples: usize,
    pub gradient_samples: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            identity_instances: 100,
            sampling_instances: 10,
            resamples: 200_000,
            gradient_samples: 500_000,
            seed: 20_240_601,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: VerifyConfig,
    pub identity: IdentityReport,
    pub sampling: Vec<SamplingReport>,
    pub sampling_pass: bool,
    pub gradient: GradientReport,
    pub all_pass: bool,
}

/// Loss identity, sampled-loss unbiasedness (3 standard errors) and
/// gradient unbiasedness (4 standard errors, d = 3, k = 3, N = 20).
pub fn run_verification(cfg: &VerifyConfig) -> Result<VerificationReport> {
    let identity = check_loss_identity(cfg.identity_instances, 50, 5, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut sampling = Vec::with_capacity(cfg.sampling_instances);
    for t in 0..cfg.sampling_instances {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let alpha = rng.random::<f64>();
        let inst = KdInstance::random(&mut rng, n, k, alpha)?;
        sampling.push(check_sampling_unbiasedness(&inst, cfg.resamples, cfg.seed.wrapping_add(100 + t as u64), 3.0)?);
    }
    let sampling_pass = sampling.iter().all(|r| r.pass);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let setup = KdSetup::random(&mut rng, 20, 3, 3, 0.5)?;
    let scorer = LinearSoftmax::random(&mut rng, 3, 3, 0.5);
    let gradient = verify_gradient_unbiasedness(&scorer, &setup, cfg.gradient_samples, cfg.seed.wrapping_add(3))?;

    let all_pass = identity.pass && sampling_pass && gradient.pass;
    Ok(VerificationReport {
        config: cfg.clone(),
        identity,
        sampling,
        sampling_pass,
        gradient,
        all_pass,
    })
}
