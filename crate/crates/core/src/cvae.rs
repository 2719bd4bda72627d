//! Conditional variational auto-encoder.
//!
//! Encoder `[x; y] → (μ, log σ²) ∈ ℝ^{2r}`, decoder `[x; z] → ŷ`. Training
//! minimizes `mean_i ‖y_i − ŷ_i‖² + λ·KL(N(μ_i, σ_i²) ‖ N(0, I))` with the
//! reparameterization `z = μ + σ ⊙ ε`.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{self, MlpModel, MlpSpec, Objective, Parameters, TrainConfig, TrainHistory};
use crate::numerics::{Matrix, Rng};

/// Hidden widths shared by encoder and decoder, by feature dimension.
pub fn hidden_widths_for(p: usize) -> Vec<usize> {
    match p {
        0..=5 => vec![32, 64, 128, 256, 128, 64, 32],
        6..=8 => vec![64, 128, 256, 128, 64],
        9..=10 => vec![64, 128, 256, 512, 256, 128, 64],
        11..=25 => vec![64, 128, 256, 256, 128, 64],
        _ => vec![128, 256, 512, 512, 256, 128],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub kl_weight: f64,
    /// `None` picks widths from the feature dimension.
    pub hidden: Option<Vec<usize>>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub train: TrainConfig,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 3,
            kl_weight: 0.01,
            hidden: None,
            dropout: 0.1,
            batch_norm: false,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 512,
                max_epochs: 10_000,
                patience: 200,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
    pub latent_dim: usize,
    pub kl_weight: f64,
}

impl Parameters for CvaeModel {
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.param_slices_mut();
        out.extend(self.decoder.param_slices_mut());
        out
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut out = self.encoder.param_sizes();
        out.extend(self.decoder.param_sizes());
        out
    }
}

/// Per-batch loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl CvaeModel {
    pub fn new(p: usize, d: usize, config: &CvaeConfig, rng: &mut Rng) -> Result<Self> {
        if config.latent_dim == 0 {
            return Err(invalid("latent dimension must be at least 1"));
        }
        if !(config.kl_weight >= 0.0) {
            return Err(invalid("KL weight must be nonnegative"));
        }
        let hidden = config.hidden.clone().unwrap_or_else(|| hidden_widths_for(p));
        let spec = |input, output| MlpSpec {
            input,
            hidden: hidden.clone(),
            output,
            dropout: config.dropout,
            batch_norm: config.batch_norm,
            leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
        };
        let r = config.latent_dim;
        Ok(Self {
            encoder: MlpModel::new(spec(p + d, 2 * r), rng)?,
            decoder: MlpModel::new(spec(p + r, d), rng)?,
            latent_dim: r,
            kl_weight: config.kl_weight,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.input_width() - self.latent_dim
    }

    pub fn response_dim(&self) -> usize {
        self.decoder.output_width()
    }

    fn check(&self, x: &[f64], v: &[f64], width: usize) -> Result<()> {
        if x.len() != self.feature_dim() || v.len() != width {
            return Err(invalid("feature or vector width does not match the model"));
        }
        Ok(())
    }

    /// Posterior mean and log-variance for each row.
    pub fn posterior(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> (Matrix, Matrix) {
        let out = self.encoder.predict(nn::hstack(xs, ys).view());
        let r = self.latent_dim;
        (out.slice(s![.., ..r]).to_owned(), out.slice(s![.., r..]).to_owned())
    }

    /// Deterministic encoding `z = μ` of every row.
    pub fn encode_mean(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Result<Matrix> {
        if xs.ncols() != self.feature_dim() || ys.ncols() != self.response_dim() || xs.nrows() != ys.nrows() {
            return Err(invalid("encode shapes do not match the model"));
        }
        Ok(self.posterior(xs, ys).0)
    }

    /// `z = μ + exp(logvar/2) ⊙ ε` if a stream is given, else `z = μ`.
    pub fn encode(&self, x: &[f64], y: &[f64], rng: Option<&mut Rng>) -> Result<Vec<f64>> {
        self.check(x, y, self.response_dim())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let ys = ArrayView2::from_shape((1, y.len()), y).expect("row");
        let (mu, lv) = self.posterior(xs, ys);
        Ok(match rng {
            Some(rng) => (0..self.latent_dim)
                .map(|j| mu[(0, j)] + (0.5 * lv[(0, j)]).exp() * rng.normal())
                .collect(),
            None => mu.row(0).to_vec(),
        })
    }

    pub fn decode(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check(x, z, self.latent_dim)?;
        let zs = ArrayView2::from_shape((1, z.len()), z).expect("row");
        Ok(self.decode_many(x, zs)?.row(0).to_vec())
    }

    /// Decodes every row of `zs` at the same `x`.
    pub fn decode_many(&self, x: &[f64], zs: ArrayView2<f64>) -> Result<Matrix> {
        if x.len() != self.feature_dim() || zs.ncols() != self.latent_dim {
            return Err(invalid("decode shapes do not match the model"));
        }
        let p = x.len();
        let mut input = Array2::zeros((zs.nrows(), p + self.latent_dim));
        for (k, mut row) in input.rows_mut().into_iter().enumerate() {
            for j in 0..p {
                row[j] = x[j];
            }
            for j in 0..self.latent_dim {
                row[p + j] = zs[(k, j)];
            }
        }
        Ok(self.decoder.predict(input.view()))
    }

    /// Decodes row `i` of `zs` at row `i` of `xs`.
    pub fn decode_rows(&self, xs: ArrayView2<f64>, zs: ArrayView2<f64>) -> Matrix {
        self.decoder.predict(nn::hstack(xs, zs).view())
    }

    /// Eval-mode loss with fixed noise `eps` (`n × r`).
    pub fn loss(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>, eps: ArrayView2<f64>) -> CvaeLoss {
        let (mu, lv) = self.posterior(xs, ys);
        let z = &mu + &(lv.mapv(|v| (0.5 * v).exp()) * eps);
        let yhat = self.decode_rows(xs, z.view());
        loss_terms(&yhat, ys, &mu, &lv, self.kl_weight)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn loss_terms(yhat: &Matrix, ys: ArrayView2<f64>, mu: &Matrix, lv: &Matrix, lambda: f64) -> CvaeLoss {
    let n = ys.nrows() as f64;
    let reconstruction = (yhat - &ys).mapv(|v| v * v).sum() / n;
    let kl = mu
        .iter()
        .zip(lv.iter())
        .map(|(m, l)| -0.5 * (1.0 + l - m * m - l.exp()))
        .sum::<f64>()
        / n;
    CvaeLoss {
        total: reconstruction + lambda * kl,
        reconstruction,
        kl,
    }
}

/// Training-mode loss and gradient on one batch with noise `eps`; dropout
/// masks come from `rng`. Gradients follow [`Parameters`] order (encoder,
/// then decoder).
pub fn batch_loss_and_grad(
    model: &CvaeModel,
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    rng: &mut Rng,
) -> (CvaeLoss, Vec<Vec<f64>>, [nn::ForwardCache; 2]) {
    let n = xs.nrows() as f64;
    let r = model.latent_dim;
    let lambda = model.kl_weight;
    let p = xs.ncols();
    let (enc_out, enc_cache) = model.encoder.forward_train(nn::hstack(xs, ys).view(), rng);
    let mu = enc_out.slice(s![.., ..r]).to_owned();
    let lv = enc_out.slice(s![.., r..]).to_owned();
    let sigma = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sigma * &eps);
    let (yhat, dec_cache) = model.decoder.forward_train(nn::hstack(xs, z.view()).view(), rng);
    let loss = loss_terms(&yhat, ys, &mu, &lv, lambda);

    let g_yhat = (&yhat - &ys) * (2.0 / n);
    let (dec_grads, g_dec_in) = model.decoder.backward(&dec_cache, g_yhat);
    let g_z = g_dec_in.slice(s![.., p..]).to_owned();
    let g_mu = &g_z + &(&mu * (lambda / n));
    let g_lv = &g_z * &eps * &sigma * 0.5 + lv.mapv(|l| 0.5 * (l.exp() - 1.0)) * (lambda / n);
    let g_enc = ndarray::concatenate(Axis(1), &[g_mu.view(), g_lv.view()]).expect("same rows");
    let (enc_grads, _) = model.encoder.backward(&enc_cache, g_enc);

    let mut grads = enc_grads.into_flat();
    grads.extend(dec_grads.into_flat());
    (loss, grads, [enc_cache, dec_cache])
}

struct CvaeObjective<'a> {
    xs: ArrayView2<'a, f64>,
    ys: ArrayView2<'a, f64>,
    val_xs: ArrayView2<'a, f64>,
    val_ys: ArrayView2<'a, f64>,
    val_eps: Matrix,
}

impl Objective for CvaeObjective<'_> {
    type Model = CvaeModel;

    fn n_train(&self) -> usize {
        self.xs.nrows()
    }

    fn loss_and_grad(&self, model: &mut CvaeModel, batch: &[usize], rng: &mut Rng) -> (f64, Vec<Vec<f64>>) {
        let xs = self.xs.select(Axis(0), batch);
        let ys = self.ys.select(Axis(0), batch);
        let eps = Array2::from_shape_fn((batch.len(), model.latent_dim), |_| rng.normal());
        let (loss, grads, [enc_cache, dec_cache]) = batch_loss_and_grad(model, xs.view(), ys.view(), eps.view(), rng);
        model.encoder.update_running_stats(&enc_cache);
        model.decoder.update_running_stats(&dec_cache);
        (loss.total, grads)
    }

    fn validation_loss(&self, model: &CvaeModel) -> f64 {
        model.loss(self.val_xs, self.val_ys, self.val_eps.view()).total
    }
}

/// Fits a CVAE with early stopping on the validation loss (fixed noise).
pub fn fit(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    val_xs: ArrayView2<f64>,
    val_ys: ArrayView2<f64>,
    config: &CvaeConfig,
) -> Result<(CvaeModel, TrainHistory)> {
    if xs.nrows() == 0 || xs.nrows() != ys.nrows() || val_xs.nrows() == 0 || val_xs.nrows() != val_ys.nrows() {
        return Err(invalid("training and validation sets must be nonempty with matching rows"));
    }
    let seed = config.train.seed;
    let model = CvaeModel::new(xs.ncols(), ys.ncols(), config, &mut Rng::derive(seed, 0x696e6974))?;
    let mut noise = Rng::derive(seed, 0x76616c);
    let val_eps = Array2::from_shape_fn((val_xs.nrows(), config.latent_dim), |_| noise.normal());
    let objective = CvaeObjective {
        xs: xs.view(),
        ys: ys.view(),
        val_xs: val_xs.view(),
        val_ys: val_ys.view(),
        val_eps,
    };
    nn::train(model, &objective, &config.train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::max_relative_error;

    fn tiny_config(r: usize, lambda: f64, dropout: f64) -> CvaeConfig {
        CvaeConfig {
            latent_dim: r,
            kl_weight: lambda,
            hidden: Some(vec![4, 4]),
            dropout,
            ..CvaeConfig::default()
        }
    }

    #[test]
    fn table_widths() {
        assert_eq!(hidden_widths_for(1), vec![32, 64, 128, 256, 128, 64, 32]);
        assert_eq!(hidden_widths_for(8), vec![64, 128, 256, 128, 64]);
        assert_eq!(hidden_widths_for(10), vec![64, 128, 256, 512, 256, 128, 64]);
        assert_eq!(hidden_widths_for(25), vec![64, 128, 256, 256, 128, 64]);
        assert_eq!(hidden_widths_for(50), vec![128, 256, 512, 512, 256, 128]);
    }

    #[test]
    fn zeroed_networks() {
        let mut rng = Rng::new(0);
        let mut m = CvaeModel::new(2, 2, &tiny_config(3, 0.01, 0.0), &mut rng).unwrap();
        m.encoder = MlpModel::zeros(m.encoder.spec.clone());
        m.decoder = MlpModel::zeros(m.decoder.spec.clone());
        m.decoder.layers.last_mut().unwrap().bias[1] = 0.7;
        let mut a = Rng::new(5);
        let mut b = Rng::new(5);
        let z = m.encode(&[1.0, 2.0], &[0.0, 0.0], Some(&mut a)).unwrap();
        let eps: Vec<f64> = (0..3).map(|_| b.normal()).collect();
        assert_eq!(z, eps);
        assert_eq!(m.encode(&[1.0, 2.0], &[0.0, 0.0], None).unwrap(), vec![0.0; 3]);
        assert_eq!(m.decode(&[1.0, 2.0], &[0.3, 0.1, 0.2]).unwrap(), vec![0.0, 0.7]);
        assert!(m.decode(&[1.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn lambda_zero_total_is_reconstruction() {
        let mut rng = Rng::new(1);
        let m = CvaeModel::new(1, 2, &tiny_config(2, 0.0, 0.0), &mut rng).unwrap();
        let xs = Array2::from_shape_fn((10, 1), |_| rng.normal());
        let ys = Array2::from_shape_fn((10, 2), |_| rng.normal());
        let eps = Array2::from_shape_fn((10, 2), |_| rng.normal());
        let l = m.loss(xs.view(), ys.view(), eps.view());
        assert_eq!(l.total, l.reconstruction);
        assert!(l.kl >= 0.0 && l.reconstruction >= 0.0);
    }

    #[test]
    fn reparameterization_gradient_check() {
        let mut rng = Rng::new(2);
        for trial in 0..6 {
            let dropout = if trial % 2 == 0 { 0.0 } else { 0.2 };
            let lambda = [0.0, 0.01, 1.0][trial % 3];
            let m = CvaeModel::new(2, 2, &tiny_config(1 + trial % 3, lambda, dropout), &mut rng).unwrap();
            let xs = Array2::from_shape_fn((5, 2), |_| rng.normal());
            let ys = Array2::from_shape_fn((5, 2), |_| rng.normal());
            let eps = Array2::from_shape_fn((5, m.latent_dim), |_| rng.normal());
            let seed = 100 + trial as u64;
            let (_, grads, _) = batch_loss_and_grad(&m, xs.view(), ys.view(), eps.view(), &mut Rng::new(seed));
            let loss_of = |mm: &CvaeModel| {
                batch_loss_and_grad(mm, xs.view(), ys.view(), eps.view(), &mut Rng::new(seed))
                    .0
                    .total
            };
            let err = max_relative_error(&m, &grads, loss_of, 100, &mut rng);
            assert!(err <= 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn autoencoding_without_kl() {
        let mut rng = Rng::new(3);
        let n = 2000;
        let xs = Array2::from_shape_fn((n, 1), |_| rng.uniform());
        let ys = Array2::from_shape_fn((n, 2), |_| rng.normal());
        let vx = Array2::from_shape_fn((300, 1), |_| rng.uniform());
        let vy = Array2::from_shape_fn((300, 2), |_| rng.normal());
        let config = CvaeConfig {
            latent_dim: 2,
            kl_weight: 0.0,
            hidden: Some(vec![32, 32]),
            dropout: 0.0,
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 128,
                max_epochs: 150,
                patience: 20,
                seed: 4,
            },
            ..CvaeConfig::default()
        };
        let (m, _) = fit(xs.view(), ys.view(), vx.view(), vy.view(), &config).unwrap();
        let z = m.encode_mean(vx.view(), vy.view()).unwrap();
        let back = m.decode_rows(vx.view(), z.view());
        let mse = (&back - &vy).mapv(|v| v * v).sum() / 300.0;
        assert!(mse <= 0.01, "{mse}");
    }

    #[test]
    fn heavy_kl_collapses_posterior() {
        let mut rng = Rng::new(5);
        let xs = Array2::from_shape_fn((1000, 1), |_| rng.uniform());
        let ys = Array2::from_shape_fn((1000, 2), |_| rng.normal());
        let config = CvaeConfig {
            latent_dim: 2,
            kl_weight: 1e3,
            hidden: Some(vec![16, 16]),
            dropout: 0.0,
            train: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 128,
                max_epochs: 1500,
                patience: 100,
                seed: 6,
            },
            ..CvaeConfig::default()
        };
        let (m, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &config).unwrap();
        let hx = Array2::from_shape_fn((200, 1), |_| rng.uniform());
        let hy = Array2::from_shape_fn((200, 2), |_| rng.normal());
        let (mu, lv) = m.posterior(hx.view(), hy.view());
        assert!(mu.iter().all(|v| v.abs() < 0.1), "{}", mu.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        assert!(lv.iter().all(|v| v.abs() < 0.1), "{}", lv.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }

    #[test]
    fn deterministic_encoding_and_roundtrip() {
        let mut rng = Rng::new(7);
        let m = CvaeModel::new(1, 2, &CvaeConfig::default(), &mut rng).unwrap();
        let a = m.encode(&[0.2], &[0.1, 0.3], None).unwrap();
        assert_eq!(a, m.encode(&[0.2], &[0.1, 0.3], None).unwrap());
        let z = [0.1, -0.2, 0.3];
        assert_eq!(m.decode(&[0.2], &z).unwrap(), m.decode(&[0.2], &z).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cvae.json");
        m.save_json(&path).unwrap();
        assert_eq!(CvaeModel::load_json(&path).unwrap(), m);
    }
}
