//! Feed-forward network with manual backpropagation.
//!
//! Hidden layers are `Linear -> [BatchNorm] -> LeakyReLU -> Dropout`; the last
//! layer is linear. Weights are stored `fan_in × fan_out` so a batch forward
//! pass is a plain `X · W + b`. Everything downstream (directional quantile
//! nets, per-dimension quantile nets, the CVAE halves) shares this engine.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Rng};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Architecture of an [`MlpModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub leaky_slope: f64,
}

impl MlpSpec {
    /// Three hidden layers of 64 units, leaky-ReLU(0.2), no dropout.
    pub fn quantile_default(input: usize, output: usize) -> Self {
        Self {
            input,
            hidden: vec![64, 64, 64],
            output,
            dropout: 0.0,
            batch_norm: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
    /// One entry per hidden layer.
    pub norms: Vec<Option<BatchNorm>>,
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

/// Activations saved by a training-mode forward pass.
pub struct ForwardCache {
    /// Input to each dense layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation (after batch norm) of each hidden layer.
    pre: Vec<Array2<f64>>,
    /// Scaled dropout masks of each hidden layer.
    masks: Vec<Option<Array2<f64>>>,
    bn: Vec<Option<BnCache>>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub norms: Vec<Option<(Array1<f64>, Array1<f64>)>>,
}

impl MlpGrads {
    /// Flattened in the same order as [`Parameters::param_slices_mut`],
    /// row-major regardless of the memory layout `dot` produced.
    pub fn into_flat(self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut norms = self.norms.into_iter();
        for (w, b) in self.weights.into_iter().zip(self.biases) {
            out.push(w.iter().copied().collect());
            out.push(b.to_vec());
            if let Some(Some((g, bt))) = norms.next() {
                out.push(g.to_vec());
                out.push(bt.to_vec());
            }
        }
        out
    }
}

/// Anything Adam can update: an ordered list of flat parameter blocks.
pub trait Parameters {
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;
    fn param_sizes(&self) -> Vec<usize>;
}

impl Parameters for MlpModel {
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let n_hidden = self.norms.len();
        let mut norms = self.norms.iter_mut();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
            if i < n_hidden {
                if let Some(Some(bn)) = norms.next() {
                    out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                    out.push(bn.beta.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(layer.weight.len());
            out.push(layer.bias.len());
            if let Some(Some(bn)) = self.norms.get(i) {
                out.push(bn.gamma.len());
                out.push(bn.beta.len());
            }
        }
        out
    }
}

impl MlpModel {
    /// He-style uniform fan-in initialization, zero biases.
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        let widths = spec.widths();
        if widths.iter().any(|&w| w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(invalid(format!("dropout must be in [0, 1), got {}", spec.dropout)));
        }
        let gain = (2.0 / (1.0 + spec.leaky_slope * spec.leaky_slope)).sqrt();
        let layers = widths
            .windows(2)
            .map(|w| {
                let limit = gain * (3.0 / w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| rng.uniform_range(-limit, limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        let norms = spec
            .hidden
            .iter()
            .map(|&w| spec.batch_norm.then(|| BatchNorm::new(w)))
            .collect();
        Ok(Self { spec, layers, norms })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: MlpSpec) -> Self {
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let norms = spec
            .hidden
            .iter()
            .map(|&w| spec.batch_norm.then(|| BatchNorm::new(w)))
            .collect();
        Self { spec, layers, norms }
    }

    pub fn input_width(&self) -> usize {
        self.spec.input
    }

    pub fn output_width(&self) -> usize {
        self.spec.output
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Single-vector forward pass. Dropout and batch statistics are only used
    /// when `train_mode` is set; otherwise the pass is deterministic and `rng`
    /// is untouched.
    pub fn forward(&self, input: &[f64], train_mode: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        if input.len() != self.spec.input {
            return Err(invalid(format!(
                "input length {} does not match network input width {}",
                input.len(),
                self.spec.input
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| invalid(e.to_string()))?;
        let out = if train_mode {
            self.forward_train(x, rng).0
        } else {
            self.predict(x)
        };
        Ok(out.iter().copied().collect())
    }

    /// Eval-mode batch forward pass.
    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n_hidden = self.spec.hidden.len();
        let slope = self.spec.leaky_slope;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i < n_hidden {
                if let Some(bn) = &self.norms[i] {
                    for mut row in z.rows_mut() {
                        for j in 0..row.len() {
                            let xh = (row[j] - bn.running_mean[j]) / (bn.running_var[j] + bn.eps).sqrt();
                            row[j] = bn.gamma[j] * xh + bn.beta[j];
                        }
                    }
                }
                z.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
            }
            h = z;
        }
        h
    }

    /// Training-mode batch forward pass (dropout on, batch statistics for
    /// batch norm). Returns the output and the cache needed by [`backward`].
    ///
    /// [`backward`]: MlpModel::backward
    pub fn forward_train(&self, x: ArrayView2<f64>, rng: &mut Rng) -> (Array2<f64>, ForwardCache) {
        let n_hidden = self.spec.hidden.len();
        let slope = self.spec.leaky_slope;
        let keep = 1.0 - self.spec.dropout;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(n_hidden),
            masks: Vec::with_capacity(n_hidden),
            bn: Vec::with_capacity(n_hidden),
        };
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            cache.inputs.push(h);
            if i < n_hidden {
                let bn_cache = self.norms[i].as_ref().map(|bn| {
                    let n = z.nrows() as f64;
                    let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
                    let var = z.map_axis(Axis(0), |c| {
                        let m = c.mean().unwrap_or(0.0);
                        c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
                    });
                    let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
                    let xhat = (&z - &mean) * &inv_std;
                    z = &xhat * &bn.gamma + &bn.beta;
                    BnCache { xhat, inv_std, mean, var }
                });
                cache.bn.push(bn_cache);
                let pre = z.clone();
                z.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
                let mask = (self.spec.dropout > 0.0).then(|| {
                    let m = Array2::from_shape_fn(z.raw_dim(), |_| {
                        if rng.uniform() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    z *= &m;
                    m
                });
                cache.pre.push(pre);
                cache.masks.push(mask);
            }
            h = z;
        }
        (h, cache)
    }

    /// Gradients of a scalar loss given `dL/d(output)`; also returns
    /// `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let n_hidden = self.spec.hidden.len();
        let slope = self.spec.leaky_slope;
        let n_layers = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut biases = vec![Array1::zeros(0); n_layers];
        let mut norms: Vec<Option<(Array1<f64>, Array1<f64>)>> = vec![None; n_hidden];
        let mut g = grad_out;
        for i in (0..n_layers).rev() {
            if i < n_hidden {
                if let Some(mask) = &cache.masks[i] {
                    g *= mask;
                }
                let pre = &cache.pre[i];
                ndarray::Zip::from(&mut g).and(pre).for_each(|gv, &p| {
                    if p <= 0.0 {
                        *gv *= slope;
                    }
                });
                if let (Some(bn), Some(bc)) = (&self.norms[i], &cache.bn[i]) {
                    let n = g.nrows() as f64;
                    let dgamma = (&g * &bc.xhat).sum_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0));
                    let dxhat = &g * &bn.gamma;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                    g = (&dxhat * n - &sum_dxhat - &bc.xhat * &sum_dxhat_xhat) * &bc.inv_std / n;
                    norms[i] = Some((dgamma, dbeta));
                }
            }
            let input = &cache.inputs[i];
            weights[i] = input.t().dot(&g);
            biases[i] = g.sum_axis(Axis(0));
            g = g.dot(&self.layers[i].weight.t());
        }
        (MlpGrads { weights, biases, norms }, g)
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates used at eval time.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (bn, bc) in self.norms.iter_mut().zip(&cache.bn) {
            if let (Some(bn), Some(bc)) = (bn, bc) {
                let m = bn.momentum;
                bn.running_mean = &bn.running_mean * (1.0 - m) + &bc.mean * m;
                bn.running_var = &bn.running_var * (1.0 - m) + &bc.var * m;
            }
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let widths = self.spec.widths();
        if self.layers.len() + 1 != widths.len() {
            return Err(invalid("layer count does not match spec"));
        }
        for (layer, w) in self.layers.iter().zip(widths.windows(2)) {
            if layer.weight.dim() != (w[0], w[1]) || layer.bias.len() != w[1] {
                return Err(invalid("layer shapes do not match spec"));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model<P: Parameters>(model: &P) -> Self {
        Self::new(&model.param_sizes())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter blocks do not match optimizer state");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Pinball (check) loss at quantile level `alpha`.
pub fn pinball_loss(y: f64, yhat: f64, alpha: f64) -> f64 {
    let r = y - yhat;
    if r > 0.0 {
        alpha * r
    } else {
        (1.0 - alpha) * (-r)
    }
}

/// `d/dŷ` of the pinball loss; the kink takes the `y < ŷ` branch.
pub fn pinball_grad(y: f64, yhat: f64, alpha: f64) -> f64 {
    if y - yhat > 0.0 {
        -alpha
    } else {
        1.0 - alpha
    }
}

/// `KL(N(μ, diag e^logvar) ‖ N(0, I))`.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(invalid(format!(
            "mu has length {} but logvar has length {}",
            mu.len(),
            logvar.len()
        )));
    }
    Ok(-0.5
        * mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>())
}

/// Mean over rows of the squared Euclidean error and its gradient.
pub fn squared_error(pred: &Array2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let diff = pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Mean pinball loss over all entries; `alphas[j]` is the level of column `j`.
pub fn pinball_batch(pred: &Array2<f64>, target: ArrayView2<f64>, alphas: &[f64]) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut loss = 0.0;
    for ((r, c), &p) in pred.indexed_iter() {
        let y = target[(r, c)];
        loss += pinball_loss(y, p, alphas[c]);
        grad[(r, c)] = pinball_grad(y, p, alphas[c]) / n;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 10_000,
            patience: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("learning rate, batch size and max epochs must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(invalid("patience cannot exceed max epochs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.validation_loss.len()
    }

    pub fn best_validation_loss(&self) -> f64 {
        self.validation_loss[self.best_epoch]
    }
}

/// A training problem over `n_train` indexed examples.
pub trait Objective {
    type Model: Clone + Parameters;

    fn n_train(&self) -> usize;

    /// Mean loss over `batch` and its gradient in parameter order. May update
    /// non-trainable state (batch-norm running statistics).
    fn loss_and_grad(&self, model: &mut Self::Model, batch: &[usize], rng: &mut Rng) -> (f64, Vec<Vec<f64>>);

    /// Deterministic validation loss.
    fn validation_loss(&self, model: &Self::Model) -> f64;
}

/// Mini-batch Adam with early stopping; returns the snapshot with the lowest
/// validation loss.
pub fn train<O: Objective>(
    mut model: O::Model,
    objective: &O,
    config: &TrainConfig,
) -> Result<(O::Model, TrainHistory)> {
    config.validate()?;
    let n = objective.n_train();
    if n == 0 {
        return Err(invalid("training set is empty"));
    }
    let mut rng = Rng::derive(config.seed, 0x7472_6169_6e);
    let mut adam = AdamState::for_model(&model);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, O::Model)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.max_epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = objective.loss_and_grad(&mut model, batch, &mut rng);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * batch.len() as f64;
            adam.update(config.learning_rate, model.param_slices_mut(), &grads);
        }
        let val = objective.validation_loss(&model);
        if !val.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.train_loss.push(total / n as f64);
        history.validation_loss.push(val);
        let improved = best.as_ref().map_or(true, |(b, _)| val < *b);
        if improved {
            best = Some((val, model.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= config.patience {
            break;
        }
    }
    let (_, best_model) = best.expect("at least one epoch runs");
    Ok((best_model, history))
}

/// Loss of a plain supervised fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    SquaredError,
    /// One level per output column.
    Pinball(Vec<f64>),
}

/// `inputs -> targets` regression with a fixed validation split.
pub struct SupervisedObjective<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub val_inputs: ArrayView2<'a, f64>,
    pub val_targets: ArrayView2<'a, f64>,
    pub loss: Loss,
}

impl SupervisedObjective<'_> {
    fn eval(&self, pred: &Array2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
        match &self.loss {
            Loss::SquaredError => squared_error(pred, target),
            Loss::Pinball(alphas) => pinball_batch(pred, target, alphas),
        }
    }
}

impl Objective for SupervisedObjective<'_> {
    type Model = MlpModel;

    fn n_train(&self) -> usize {
        self.inputs.nrows()
    }

    fn loss_and_grad(&self, model: &mut MlpModel, batch: &[usize], rng: &mut Rng) -> (f64, Vec<Vec<f64>>) {
        let x = self.inputs.select(Axis(0), batch);
        let y = self.targets.select(Axis(0), batch);
        let (out, cache) = model.forward_train(x.view(), rng);
        let (loss, g) = self.eval(&out, y.view());
        let (grads, _) = model.backward(&cache, g);
        model.update_running_stats(&cache);
        (loss, grads.into_flat())
    }

    fn validation_loss(&self, model: &MlpModel) -> f64 {
        let pred = model.predict(self.val_inputs);
        self.eval(&pred, self.val_targets).0
    }
}

/// Convenience wrapper: fits a fresh network on a supervised problem.
pub fn fit_supervised(
    spec: MlpSpec,
    objective: &SupervisedObjective<'_>,
    config: &TrainConfig,
) -> Result<(MlpModel, TrainHistory)> {
    if objective.inputs.nrows() != objective.targets.nrows()
        || objective.val_inputs.nrows() != objective.val_targets.nrows()
    {
        return Err(invalid("input and target row counts differ"));
    }
    if objective.val_inputs.nrows() == 0 {
        return Err(invalid("validation set is empty"));
    }
    let mut rng = Rng::derive(config.seed, 0x696e_6974);
    let model = MlpModel::new(spec, &mut rng)?;
    train(model, objective, config)
}

/// Concatenates `[a | b]` column-wise.
pub fn hstack(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Matrix {
    assert_eq!(a.nrows(), b.nrows(), "row counts differ");
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(ndarray::s![.., a.ncols()..]).assign(&b);
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    pub(crate) fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Array2::from_shape_fn((rows, cols), |_| rng.normal())
    }

    /// Central finite differences of `loss` w.r.t. every parameter of `model`
    /// compared with `analytic`, returning the largest relative error.
    pub(crate) fn max_relative_error<P: Parameters + Clone>(
        model: &P,
        analytic: &[Vec<f64>],
        loss: impl Fn(&P) -> f64,
        probes: usize,
        rng: &mut Rng,
    ) -> f64 {
        let h = 1e-5;
        let sizes = model.param_sizes();
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let block = rng.below(sizes.len());
            let idx = rng.below(sizes[block]);
            let mut plus = model.clone();
            plus.param_slices_mut()[block][idx] += h;
            let mut minus = model.clone();
            minus.param_slices_mut()[block][idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[block][idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }

    fn small_spec(rng: &mut Rng, batch_norm: bool, dropout: f64) -> MlpSpec {
        let depth = 1 + rng.below(3);
        MlpSpec {
            input: 1 + rng.below(8),
            hidden: (0..depth).map(|_| 1 + rng.below(8)).collect(),
            output: 1 + rng.below(3),
            dropout,
            batch_norm,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(MlpSpec::quantile_default(3, 2));
        let mut rng = Rng::new(0);
        assert_eq!(m.forward(&[1.0, -2.0, 3.0], false, &mut rng).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec {
            input: 3,
            hidden: vec![],
            output: 3,
            dropout: 0.0,
            batch_norm: false,
            leaky_slope: 0.2,
        };
        let mut m = MlpModel::zeros(spec);
        m.layers[0].weight = Array2::eye(3);
        let mut rng = Rng::new(0);
        assert_eq!(m.forward(&[0.5, -1.0, 2.0], false, &mut rng).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = Rng::new(3);
        let mut spec = MlpSpec::quantile_default(4, 2);
        spec.dropout = 0.3;
        let m = MlpModel::new(spec, &mut rng).unwrap();
        let a = m.forward(&[0.1, 0.2, 0.3, 0.4], false, &mut rng).unwrap();
        let b = m.forward(&[0.1, 0.2, 0.3, 0.4], false, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(m.forward(&[0.1, 0.2], false, &mut rng).is_err());
    }

    #[test]
    fn train_mode_applies_dropout() {
        let mut rng = Rng::new(5);
        let mut spec = MlpSpec::quantile_default(4, 1);
        spec.dropout = 0.5;
        let m = MlpModel::new(spec, &mut rng).unwrap();
        let outs: Vec<f64> = (0..20)
            .map(|_| m.forward(&[0.1, 0.2, 0.3, 0.4], true, &mut rng).unwrap()[0])
            .collect();
        assert!(outs.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn pinball_examples() {
        assert_abs_diff_eq!(pinball_loss(1.0, 0.0, 0.9), 0.9);
        assert_abs_diff_eq!(pinball_loss(0.0, 1.0, 0.9), 0.1, epsilon = 1e-15);
        assert_eq!(pinball_loss(2.5, 2.5, 0.3), 0.0);
        assert_eq!(pinball_grad(1.0, 1.0, 0.3), 0.7);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(gaussian_kl(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        // KL(N(0,4) || N(0,1)) by quadrature of p log(p/q)
        let s2: f64 = 4.0;
        let log_p = |t: f64| -t * t / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        let log_q = |t: f64| -t * t / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let (a, b, n) = (-40.0, 40.0, 200_000);
        let h = (b - a) / n as f64;
        let oracle: f64 = (0..n)
            .map(|i| {
                let t = a + (i as f64 + 0.5) * h;
                log_p(t).exp() * (log_p(t) - log_q(t)) * h
            })
            .sum();
        let kl = gaussian_kl(&[0.0], &[s2.ln()]).unwrap();
        assert_abs_diff_eq!(kl, 0.5 * (4.0 - 1.0 - 4f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(kl, oracle, epsilon = 1e-6);
        assert!(gaussian_kl(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_check_squared_error_and_pinball() {
        let mut rng = Rng::new(21);
        for trial in 0..12 {
            let bn = trial % 3 == 0;
            let dropout = if trial % 2 == 0 { 0.25 } else { 0.0 };
            let spec = small_spec(&mut rng, bn, dropout);
            let model = MlpModel::new(spec.clone(), &mut rng).unwrap();
            let x = random_matrix(6, spec.input, &mut rng);
            let y = random_matrix(6, spec.output, &mut rng);
            let mask_seed = 1000 + trial as u64;
            let alphas: Vec<f64> = (0..spec.output).map(|j| 0.1 + 0.3 * j as f64).collect();
            for use_pinball in [false, true] {
                let loss_of = |m: &MlpModel| {
                    let (out, _) = m.forward_train(x.view(), &mut Rng::new(mask_seed));
                    if use_pinball {
                        pinball_batch(&out, y.view(), &alphas).0
                    } else {
                        squared_error(&out, y.view()).0
                    }
                };
                let (out, cache) = model.forward_train(x.view(), &mut Rng::new(mask_seed));
                let g = if use_pinball {
                    // stay away from the kink
                    let min_gap = out.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(f64::MAX, f64::min);
                    if min_gap < 1e-3 {
                        continue;
                    }
                    pinball_batch(&out, y.view(), &alphas).1
                } else {
                    squared_error(&out, y.view()).1
                };
                let analytic = model.backward(&cache, g).0.into_flat();
                let err = max_relative_error(&model, &analytic, loss_of, 40, &mut rng);
                assert!(err <= 1e-4, "trial {trial} pinball={use_pinball}: {err} {spec:?}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let spec = small_spec(&mut rng, false, 0.0);
        let model = MlpModel::new(spec.clone(), &mut rng).unwrap();
        let x = random_matrix(3, spec.input, &mut rng);
        let y = random_matrix(3, spec.output, &mut rng);
        let (out, cache) = model.forward_train(x.view(), &mut rng);
        let (_, gin) = model.backward(&cache, squared_error(&out, y.view()).1);
        let h = 1e-6;
        for ((r, c), &a) in gin.indexed_iter() {
            let mut xp = x.clone();
            xp[(r, c)] += h;
            let mut xm = x.clone();
            xm[(r, c)] -= h;
            let num = (squared_error(&model.predict(xp.view()), y.view()).0
                - squared_error(&model.predict(xm.view()), y.view()).0)
                / (2.0 * h);
            assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn linear_regression_converges() {
        let mut rng = Rng::new(1);
        let x = Array2::from_shape_fn((400, 1), |_| rng.uniform_range(-1.0, 1.0));
        let y = x.mapv(|v| 2.0 * v);
        let xv = Array2::from_shape_fn((100, 1), |_| rng.uniform_range(-1.0, 1.0));
        let yv = xv.mapv(|v| 2.0 * v);
        let spec = MlpSpec {
            input: 1,
            hidden: vec![],
            output: 1,
            dropout: 0.0,
            batch_norm: false,
            leaky_slope: 0.2,
        };
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: xv.view(),
            val_targets: yv.view(),
            loss: Loss::SquaredError,
        };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 300,
            patience: 30,
            seed: 2,
        };
        let (m, hist) = fit_supervised(spec, &obj, &cfg).unwrap();
        assert!(hist.best_validation_loss() <= 1e-4, "{}", hist.best_validation_loss());
        // closed-form oracle: slope 2, intercept 0
        assert_abs_diff_eq!(m.layers[0].weight[(0, 0)], 2.0, epsilon = 0.01);
    }

    #[test]
    fn constant_model_recovers_sample_quantile() {
        let mut rng = Rng::new(4);
        let n = 1001;
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut sorted = y.clone();
        sorted.sort_by(f64::total_cmp);
        let x = Array2::<f64>::zeros((n, 1));
        let ym = Array2::from_shape_vec((n, 1), y).unwrap();
        let spec = MlpSpec {
            input: 1,
            hidden: vec![],
            output: 1,
            dropout: 0.0,
            batch_norm: false,
            leaky_slope: 0.2,
        };
        let alpha = 0.75;
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: ym.view(),
            val_inputs: x.view(),
            val_targets: ym.view(),
            loss: Loss::Pinball(vec![alpha]),
        };
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: n,
            max_epochs: 3000,
            patience: 200,
            seed: 0,
        };
        let (m, _) = fit_supervised(spec, &obj, &cfg).unwrap();
        let c = m.layers[0].bias[0];
        let k = (alpha * n as f64).ceil() as usize; // 1-based
        assert!(c >= sorted[k - 2] && c <= sorted[k], "c={c} q={}", sorted[k - 1]);
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let x = array![[0.0], [1.0]];
        let y = array![[0.0], [2.0]];
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: x.view(),
            val_targets: y.view(),
            loss: Loss::SquaredError,
        };
        let cfg = TrainConfig {
            patience: 0,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let (_, hist) = fit_supervised(MlpSpec::quantile_default(1, 1), &obj, &cfg).unwrap();
        assert_eq!(hist.epochs(), 1);
    }

    #[test]
    fn early_stopping_returns_best_snapshot() {
        let mut rng = Rng::new(9);
        let x = random_matrix(64, 2, &mut rng);
        let y = x.map_axis(Axis(1), |r| r[0].sin() + r[1]).insert_axis(Axis(1));
        let xv = random_matrix(32, 2, &mut rng);
        let yv = xv.map_axis(Axis(1), |r| r[0].sin() + r[1]).insert_axis(Axis(1));
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: xv.view(),
            val_targets: yv.view(),
            loss: Loss::SquaredError,
        };
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 60,
            patience: 5,
            seed: 1,
        };
        let (m, hist) = fit_supervised(MlpSpec::quantile_default(2, 1), &obj, &cfg).unwrap();
        let returned = obj.validation_loss(&m);
        assert_eq!(returned, hist.best_validation_loss());
        assert!(hist.validation_loss.iter().all(|&v| returned <= v));
    }

    #[test]
    fn diverged_training_reports_epoch() {
        let x = array![[1.0], [2.0]];
        let y = array![[f64::NAN], [1.0]];
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: x.view(),
            val_targets: y.view(),
            loss: Loss::SquaredError,
        };
        let err = fit_supervised(MlpSpec::quantile_default(1, 1), &obj, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch: 0 }));
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let mut rng = Rng::new(12);
        let x = random_matrix(50, 3, &mut rng);
        let y = random_matrix(50, 1, &mut rng);
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: x.view(),
            val_targets: y.view(),
            loss: Loss::Pinball(vec![0.3]),
        };
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            patience: 5,
            ..TrainConfig::default()
        };
        let mut spec = MlpSpec::quantile_default(3, 1);
        spec.dropout = 0.1;
        spec.batch_norm = true;
        let (a, _) = fit_supervised(spec.clone(), &obj, &cfg).unwrap();
        let (b, _) = fit_supervised(spec, &obj, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut rng = Rng::new(77);
        let mut spec = MlpSpec::quantile_default(5, 2);
        spec.batch_norm = true;
        let m = MlpModel::new(spec, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save_json(&path).unwrap();
        let back = MlpModel::load_json(&path).unwrap();
        for (a, b) in m.layers.iter().zip(&back.layers) {
            assert!(a.weight.iter().zip(b.weight.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(m, back);
    }

    #[test]
    fn params_stay_finite_after_steps() {
        let mut rng = Rng::new(31);
        let x = random_matrix(40, 2, &mut rng);
        let y = random_matrix(40, 1, &mut rng);
        let obj = SupervisedObjective {
            inputs: x.view(),
            targets: y.view(),
            val_inputs: x.view(),
            val_targets: y.view(),
            loss: Loss::SquaredError,
        };
        let mut model = MlpModel::new(MlpSpec::quantile_default(2, 1), &mut rng).unwrap();
        let mut adam = AdamState::for_model(&model);
        for _ in 0..50 {
            let (_, g) = obj.loss_and_grad(&mut model, &[0, 1, 2, 3, 4], &mut rng);
            adam.update(1e-2, model.param_slices_mut(), &g);
            assert!(model.is_finite());
        }
        assert_eq!(adam.step_count(), 50);
    }
}
