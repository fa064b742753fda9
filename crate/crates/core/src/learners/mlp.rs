//! Feed-forward network with ReLU hidden layers, optional batch
//! normalization and a sigmoid output, trained by mini-batch SGD with
//! momentum on the weighted cross-entropy
//! `w⁺·H(1, p) + w⁻·H(0, p)`.
//!
//! Inputs are standardized with statistics of the training matrix; the shift
//! and scale are part of the model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gbdt::sigmoid;
use crate::error::{Error, Result};
use crate::metrics::roc_auc;

const BN_EPS: f64 = 1e-5;
const BN_RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpParams {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Stop after this many epochs without validation-AUC improvement.
    /// `None` trains for all epochs.
    pub patience: Option<usize>,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden_sizes: vec![64, 32],
            epochs: 200,
            batch_size: 256,
            learning_rate: 0.01,
            momentum: 0.9,
            patience: Some(10),
            batch_norm: false,
            seed: 0,
        }
    }
}

impl MlpParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("mlp hidden_sizes must be non-empty and positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == Some(0) {
            return Err(Error::invalid("mlp epochs, batch_size and patience must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("mlp learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("mlp momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Serializes `f64` arrays as decimal strings with 17 significant digits.
mod decimal17 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| format!("{x:.16e}")))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| D::Error::custom(format!("bad number {s:?}: {e}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    #[serde(with = "decimal17")]
    pub weights: Vec<f64>,
    #[serde(with = "decimal17")]
    pub bias: Vec<f64>,
}

impl Dense {
    fn init<R: Rng>(rng: &mut R, inputs: usize, outputs: usize, limit: f64) -> Self {
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, a: &[f64], rows: usize) -> Vec<f64> {
        let mut z = vec![0.0; rows * self.outputs];
        for b in 0..rows {
            let x = &a[b * self.inputs..(b + 1) * self.inputs];
            for o in 0..self.outputs {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                z[b * self.outputs + o] = self.bias[o] + w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    #[serde(with = "decimal17")]
    pub gamma: Vec<f64>,
    #[serde(with = "decimal17")]
    pub beta: Vec<f64>,
    #[serde(with = "decimal17")]
    pub running_mean: Vec<f64>,
    #[serde(with = "decimal17")]
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(units: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(with = "decimal17")]
    pub input_shift: Vec<f64>,
    #[serde(with = "decimal17")]
    pub input_scale: Vec<f64>,
    pub hidden: Vec<Dense>,
    /// One per hidden layer when batch normalization is enabled, else empty.
    pub norms: Vec<BatchNorm>,
    pub output: Dense,
}

struct LayerCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_activation: Vec<f64>,
}

/// Gradients laid out like `Network::param_slices`.
pub type Gradients = Vec<Vec<f64>>;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Network {
    fn init<R: Rng>(rng: &mut R, inputs: usize, hidden_sizes: &[usize], batch_norm: bool) -> Self {
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut fan_in = inputs;
        for &h in hidden_sizes {
            let limit = (6.0 / fan_in.max(1) as f64).sqrt();
            hidden.push(Dense::init(rng, fan_in, h, limit));
            fan_in = h;
        }
        let limit = (6.0 / (fan_in + 1) as f64).sqrt();
        let output = Dense::init(rng, fan_in, 1, limit);
        let norms = if batch_norm {
            hidden_sizes.iter().map(|&h| BatchNorm::new(h)).collect()
        } else {
            Vec::new()
        };
        Network {
            input_shift: vec![0.0; inputs],
            input_scale: vec![1.0; inputs],
            hidden,
            norms,
            output,
        }
    }

    fn inputs(&self) -> usize {
        self.input_shift.len()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        let d = self.inputs();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.input_shift[i % d.max(1)]) * self.input_scale[i % d.max(1)])
            .collect()
    }

    /// Inference-mode logits for a raw row-major batch.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let rows = if self.inputs() == 0 { 0 } else { x.len() / self.inputs() };
        let mut a = self.standardize(x);
        for (l, layer) in self.hidden.iter().enumerate() {
            let mut z = layer.forward(&a, rows);
            if let Some(bn) = self.norms.get(l) {
                for (k, v) in z.iter_mut().enumerate() {
                    let o = k % layer.outputs;
                    *v = bn.gamma[o] * (*v - bn.running_mean[o]) / (bn.running_var[o] + BN_EPS).sqrt() + bn.beta[o];
                }
            }
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            a = z;
        }
        self.output.forward(&a, rows)
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }

    /// Parameter vectors in a fixed order: per hidden layer weights, bias and
    /// (with batch norm) gamma, beta; then output weights and bias.
    pub fn param_slices(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for (l, layer) in self.hidden.iter().enumerate() {
            out.push(&layer.weights);
            out.push(&layer.bias);
            if let Some(bn) = self.norms.get(l) {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.output.weights);
        out.push(&self.output.bias);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for layer in self.hidden.iter_mut() {
            out.push(&mut layer.weights);
            out.push(&mut layer.bias);
            if let Some(bn) = norms.next() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.output.weights);
        out.push(&mut self.output.bias);
        out
    }

    /// Training-mode forward and backward pass over one raw batch. Returns
    /// the batch-mean weighted loss and its gradients; batch-norm layers use
    /// batch statistics and, when `update_running` is set, refresh their
    /// running averages.
    pub fn loss_and_gradients(
        &mut self,
        x: &[f64],
        w_pos: &[f64],
        w_neg: &[f64],
        update_running: bool,
    ) -> (f64, Gradients) {
        let rows = w_pos.len();
        let bsz = rows as f64;
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut a = self.standardize(x);
        for l in 0..self.hidden.len() {
            let layer = &self.hidden[l];
            let units = layer.outputs;
            let z = layer.forward(&a, rows);
            let (mut u, xhat, inv_std) = if let Some(bn) = self.norms.get_mut(l) {
                let mut mean = vec![0.0; units];
                let mut var = vec![0.0; units];
                for b in 0..rows {
                    for o in 0..units {
                        mean[o] += z[b * units + o];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= bsz);
                for b in 0..rows {
                    for o in 0..units {
                        let d = z[b * units + o] - mean[o];
                        var[o] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= bsz);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; rows * units];
                let mut u = vec![0.0; rows * units];
                for b in 0..rows {
                    for o in 0..units {
                        let k = b * units + o;
                        xhat[k] = (z[k] - mean[o]) * inv_std[o];
                        u[k] = bn.gamma[o] * xhat[k] + bn.beta[o];
                    }
                }
                if update_running {
                    for o in 0..units {
                        bn.running_mean[o] =
                            (1.0 - BN_RUNNING_MOMENTUM) * bn.running_mean[o] + BN_RUNNING_MOMENTUM * mean[o];
                        bn.running_var[o] =
                            (1.0 - BN_RUNNING_MOMENTUM) * bn.running_var[o] + BN_RUNNING_MOMENTUM * var[o];
                    }
                }
                (u, xhat, inv_std)
            } else {
                (z, Vec::new(), Vec::new())
            };
            let pre_activation = u.clone();
            u.iter_mut().for_each(|v| *v = v.max(0.0));
            caches.push(LayerCache {
                input: std::mem::replace(&mut a, u),
                xhat,
                inv_std,
                pre_activation,
            });
        }
        let logits = self.output.forward(&a, rows);

        let mut loss = 0.0;
        let mut dlogit = vec![0.0; rows];
        for b in 0..rows {
            let z = logits[b];
            loss += w_pos[b] * softplus(-z) + w_neg[b] * softplus(z);
            dlogit[b] = ((w_pos[b] + w_neg[b]) * sigmoid(z) - w_pos[b]) / bsz;
        }
        loss /= bsz;

        let mut grads: Vec<Vec<f64>> = Vec::new();
        // output layer
        let out_in = self.output.inputs;
        let mut gw = vec![0.0; out_in];
        let mut gb = vec![0.0; 1];
        let mut da = vec![0.0; rows * out_in];
        for b in 0..rows {
            let row = &a[b * out_in..(b + 1) * out_in];
            for (k, v) in row.iter().enumerate() {
                gw[k] += dlogit[b] * v;
                da[b * out_in + k] = dlogit[b] * self.output.weights[k];
            }
            gb[0] += dlogit[b];
        }
        let mut tail = vec![gb, gw];

        for l in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[l];
            let cache = &caches[l];
            let units = layer.outputs;
            let mut du: Vec<f64> = da
                .iter()
                .zip(&cache.pre_activation)
                .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
                .collect();
            if let Some(bn) = self.norms.get(l) {
                let mut dgamma = vec![0.0; units];
                let mut dbeta = vec![0.0; units];
                let mut sum_dxhat = vec![0.0; units];
                let mut sum_dxhat_xhat = vec![0.0; units];
                for b in 0..rows {
                    for o in 0..units {
                        let k = b * units + o;
                        dgamma[o] += du[k] * cache.xhat[k];
                        dbeta[o] += du[k];
                        let dxhat = du[k] * bn.gamma[o];
                        sum_dxhat[o] += dxhat;
                        sum_dxhat_xhat[o] += dxhat * cache.xhat[k];
                    }
                }
                for b in 0..rows {
                    for o in 0..units {
                        let k = b * units + o;
                        let dxhat = du[k] * bn.gamma[o];
                        du[k] = cache.inv_std[o] / bsz
                            * (bsz * dxhat - sum_dxhat[o] - cache.xhat[k] * sum_dxhat_xhat[o]);
                    }
                }
                tail.push(dbeta);
                tail.push(dgamma);
            }
            let inputs = layer.inputs;
            let mut gw = vec![0.0; units * inputs];
            let mut gb = vec![0.0; units];
            let mut da_prev = vec![0.0; rows * inputs];
            for b in 0..rows {
                let x = &cache.input[b * inputs..(b + 1) * inputs];
                let dx = &mut da_prev[b * inputs..(b + 1) * inputs];
                for o in 0..units {
                    let g = du[b * units + o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let wrow = &layer.weights[o * inputs..(o + 1) * inputs];
                    let grow = &mut gw[o * inputs..(o + 1) * inputs];
                    for k in 0..inputs {
                        grow[k] += g * x[k];
                        dx[k] += g * wrow[k];
                    }
                }
            }
            tail.push(gb);
            tail.push(gw);
            da = da_prev;
        }
        // `tail` was built back to front
        while let Some(g) = tail.pop() {
            grads.push(g);
        }
        (loss, grads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs_run: usize,
    /// Index into `valid_auc` of the restored parameters.
    pub best_epoch: Option<usize>,
    pub valid_auc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub network: Network,
    pub history: TrainingHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; stops after `patience` consecutive
/// epochs without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if score > self.best {
            self.best = score;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Trains on the row-major `n × d` matrix `x`. `valid` is an encoded
/// matrix with hard labels for early stopping.
pub fn fit(
    params: &MlpParams,
    x: &[f64],
    d: usize,
    w_pos: &[f64],
    w_neg: &[f64],
    valid: Option<(&[f64], &[u8])>,
) -> Result<MlpModel> {
    params.validate()?;
    let n = w_pos.len();
    if params.patience.is_some() && valid.is_none() {
        return Err(Error::MissingValidation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut net = Network::init(&mut rng, d, &params.hidden_sizes, params.batch_norm);
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        net.input_shift[j] = mean;
        net.input_scale[j] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    }

    let mut velocity: Vec<Vec<f64>> = net.param_slices().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopper = params.patience.map(EarlyStopping::new);
    let mut best_net: Option<Network> = None;
    let mut history = TrainingHistory {
        epochs_run: 0,
        best_epoch: None,
        valid_auc: Vec::new(),
    };

    let mut bx = Vec::with_capacity(params.batch_size * d);
    let mut bp = Vec::with_capacity(params.batch_size);
    let mut bn = Vec::with_capacity(params.batch_size);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(params.batch_size) {
            if params.batch_norm && chunk.len() < 2 {
                continue;
            }
            bx.clear();
            bp.clear();
            bn.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * d..(i + 1) * d]);
                bp.push(w_pos[i]);
                bn.push(w_neg[i]);
            }
            let (loss, grads) = net.loss_and_gradients(&bx, &bp, &bn, true);
            if !loss.is_finite() {
                return Err(Error::Training(format!("mlp loss diverged at epoch {epoch}")));
            }
            for ((param, vel), grad) in net.param_slices_mut().into_iter().zip(&mut velocity).zip(&grads) {
                for k in 0..param.len() {
                    vel[k] = params.momentum * vel[k] - params.learning_rate * grad[k];
                    param[k] += vel[k];
                }
            }
        }
        history.epochs_run = epoch + 1;

        if let Some((vx, vy)) = valid {
            let auc = roc_auc(&net.predict(vx), vy)?;
            history.valid_auc.push(auc);
            if let Some(stop) = stopper.as_mut() {
                match stop.observe(epoch, auc) {
                    StopDecision::Improved => best_net = Some(net.clone()),
                    StopDecision::Continue => {}
                    StopDecision::Stop => break,
                }
            }
        }
    }
    if let (Some(stop), Some(best)) = (stopper, best_net) {
        history.best_epoch = stop.best_epoch();
        net = best;
    }
    Ok(MlpModel { network: net, history })
}
