//! Non-parametric directional quantile regression.
//!
//! A network `f(x, u)` learns the lower `τ`-quantile of the projection `uᵀY`
//! given `X = x`. The region at `x` is the intersection of the half-spaces
//! `{y : uᵀy ≥ f(x, u)}` over a frozen set of membership directions.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::{DiscreteRegion, RegionProvider, Space};
use crate::error::{invalid, Result};
use crate::nn::{self, MlpModel, MlpSpec, Objective, Parameters, TrainConfig, TrainHistory};
use crate::numerics::{dot, Matrix, Rng};
use crate::regions::Grid;

/// Fixed set of unit directions on the sphere `S^{d-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionPool {
    pub dim: usize,
    /// `count × dim`, unit rows.
    pub directions: Array2<f64>,
    pub seed: u64,
}

impl DirectionPool {
    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Matrix {
        self.directions.select(Axis(0), idx)
    }
}

/// Normalized i.i.d. Gaussian vectors.
pub fn sample_direction_pool(d: usize, count: usize, rng: &mut Rng) -> Result<DirectionPool> {
    if d == 0 || count == 0 {
        return Err(invalid("direction pool needs d >= 1 and count >= 1"));
    }
    let mut directions = Array2::zeros((count, d));
    for mut row in directions.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.normal();
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    Ok(DirectionPool { dim: d, directions, seed: rng.seed() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpdqrConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub pool_size: usize,
    pub directions_per_step: usize,
    pub membership_directions: usize,
    pub validation_directions: usize,
    pub train: TrainConfig,
}

impl Default for NpdqrConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            dropout: 0.0,
            pool_size: 2048,
            directions_per_step: 32,
            membership_directions: 256,
            validation_directions: 32,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 256,
                max_epochs: 10_000,
                patience: 100,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpdqrModel {
    pub net: MlpModel,
    pub pool: DirectionPool,
    /// Lower directional quantile level (`1 −` directional coverage).
    pub tau: f64,
    /// Frozen `m × d` directions used for membership.
    pub membership: Array2<f64>,
    pub directions_per_step: usize,
}

/// Rows `[x; u_k]` for every direction `u_k` in `dirs`.
fn direction_inputs(x: &[f64], dirs: ArrayView2<f64>) -> Matrix {
    let p = x.len();
    let d = dirs.ncols();
    let mut out = Array2::zeros((dirs.nrows(), p + d));
    for (k, mut row) in out.rows_mut().into_iter().enumerate() {
        for j in 0..p {
            row[j] = x[j];
        }
        for j in 0..d {
            row[p + j] = dirs[(k, j)];
        }
    }
    out
}

/// Pair every row of `(xs, ys)` with every direction: inputs `[x_i; u_k]`,
/// targets `u_kᵀ y_i`.
fn paired_batch(xs: ArrayView2<f64>, ys: ArrayView2<f64>, rows: &[usize], dirs: ArrayView2<f64>) -> (Matrix, Matrix) {
    let (p, d, m) = (xs.ncols(), ys.ncols(), dirs.nrows());
    let mut inputs = Array2::zeros((rows.len() * m, p + d));
    let mut targets = Array2::zeros((rows.len() * m, 1));
    for (b, &i) in rows.iter().enumerate() {
        let x = xs.row(i);
        let y = ys.row(i);
        for k in 0..m {
            let r = b * m + k;
            let u = dirs.row(k);
            for j in 0..p {
                inputs[(r, j)] = x[j];
            }
            for j in 0..d {
                inputs[(r, p + j)] = u[j];
            }
            targets[(r, 0)] = u.dot(&y);
        }
    }
    (inputs, targets)
}

struct DirectionalObjective<'a> {
    xs: ArrayView2<'a, f64>,
    ys: ArrayView2<'a, f64>,
    pool: &'a DirectionPool,
    per_step: usize,
    tau: f64,
    val_inputs: Matrix,
    val_targets: Matrix,
}

impl Objective for DirectionalObjective<'_> {
    type Model = MlpModel;

    fn n_train(&self) -> usize {
        self.xs.nrows()
    }

    fn loss_and_grad(&self, model: &mut MlpModel, batch: &[usize], rng: &mut Rng) -> (f64, Vec<Vec<f64>>) {
        let dir_idx = rng.sample_indices(self.pool.len(), self.per_step);
        let dirs = self.pool.select(&dir_idx);
        let (inputs, targets) = paired_batch(self.xs, self.ys, batch, dirs.view());
        let (out, cache) = model.forward_train(inputs.view(), rng);
        let (loss, g) = nn::pinball_batch(&out, targets.view(), &[self.tau]);
        let (grads, _) = model.backward(&cache, g);
        model.update_running_stats(&cache);
        (loss, grads.into_flat())
    }

    fn validation_loss(&self, model: &MlpModel) -> f64 {
        let pred = model.predict(self.val_inputs.view());
        nn::pinball_batch(&pred, self.val_targets.view(), &[self.tau]).0
    }
}

/// Trains `f(x, u)` on `(xs, ys)` with early stopping on `(val_xs, val_ys)`.
pub fn fit(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    val_xs: ArrayView2<f64>,
    val_ys: ArrayView2<f64>,
    tau: f64,
    config: &NpdqrConfig,
) -> Result<(NpdqrModel, TrainHistory)> {
    if !(tau > 0.0 && tau < 0.5) {
        return Err(invalid(format!("directional level must be in (0, 0.5), got {tau}")));
    }
    if xs.nrows() == 0 || xs.nrows() != ys.nrows() || val_xs.nrows() == 0 || val_xs.nrows() != val_ys.nrows() {
        return Err(invalid("training and validation sets must be nonempty with matching rows"));
    }
    if config.directions_per_step == 0 || config.membership_directions == 0 || config.validation_directions == 0 {
        return Err(invalid("direction counts must be positive"));
    }
    let seed = config.train.seed;
    let (p, d) = (xs.ncols(), ys.ncols());
    let pool = sample_direction_pool(d, config.pool_size, &mut Rng::derive(seed, 0x706f6f6c))?;
    let per_step = config.directions_per_step.min(pool.len());
    let val_idx = Rng::derive(seed, 0x76616c).sample_indices(pool.len(), config.validation_directions);
    let val_dirs = pool.select(&val_idx);
    let all_val: Vec<usize> = (0..val_xs.nrows()).collect();
    let (val_inputs, val_targets) = paired_batch(val_xs, val_ys, &all_val, val_dirs.view());
    let memb_idx = Rng::derive(seed, 0x6d656d62).sample_indices(pool.len(), config.membership_directions);
    let membership = pool.select(&memb_idx);

    let spec = MlpSpec {
        input: p + d,
        hidden: config.hidden.clone(),
        output: 1,
        dropout: config.dropout,
        batch_norm: false,
        leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
    };
    let net = MlpModel::new(spec, &mut Rng::derive(seed, 0x696e6974))?;
    let (net, history) = {
        // fresh views so both share one (invariant) lifetime
        let objective = DirectionalObjective {
            xs: xs.view(),
            ys: ys.view(),
            pool: &pool,
            per_step,
            tau,
            val_inputs,
            val_targets,
        };
        nn::train(net, &objective, &config.train)?
    };
    Ok((
        NpdqrModel {
            net,
            pool,
            tau,
            membership,
            directions_per_step: per_step,
        },
        history,
    ))
}

impl NpdqrModel {
    pub fn feature_dim(&self) -> usize {
        self.net.input_width() - self.pool.dim
    }

    pub fn response_dim(&self) -> usize {
        self.pool.dim
    }

    /// `f(x, u)` for each row of `dirs`.
    pub fn thresholds_for(&self, x: &[f64], dirs: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.len() != self.feature_dim() || dirs.ncols() != self.pool.dim {
            return Err(invalid("feature or direction width does not match the model"));
        }
        let out = self.net.predict(direction_inputs(x, dirs).view());
        Ok(out.column(0).to_vec())
    }

    /// Thresholds of the membership directions at `x`.
    pub fn thresholds(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.thresholds_for(x, self.membership.view())
    }

    pub fn contains(&self, x: &[f64], y: &[f64]) -> Result<bool> {
        if y.len() != self.pool.dim {
            return Err(invalid("response width does not match the model"));
        }
        let t = self.thresholds(x)?;
        Ok(HalfSpaces::new(&self.membership, &t).contains(y))
    }

    /// Grid points inside the intersection of half-spaces at `x`.
    pub fn extract_region(&self, x: &[f64], grid: &Grid) -> Result<DiscreteRegion> {
        self.extract_from_points(x, grid.points().view(), Space::Response)
    }

    /// Rows of `points` inside the intersection of half-spaces at `x`.
    pub fn extract_from_points(&self, x: &[f64], points: ArrayView2<f64>, space: Space) -> Result<DiscreteRegion> {
        if points.ncols() != self.pool.dim {
            return Err(invalid("grid dimension does not match the model"));
        }
        let t = self.thresholds(x)?;
        let hs = HalfSpaces::new(&self.membership, &t);
        let inside = hs.filter(points);
        DiscreteRegion::new(points.select(Axis(0), &inside), space, x.to_vec())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn param_count(&self) -> usize {
        self.net.param_sizes().iter().sum()
    }
}

/// Intersection of `{y : uᵀy ≥ t}` over paired rows of `dirs` and `t`.
pub struct HalfSpaces<'a> {
    dirs: &'a Array2<f64>,
    t: &'a [f64],
}

impl<'a> HalfSpaces<'a> {
    pub fn new(dirs: &'a Array2<f64>, t: &'a [f64]) -> Self {
        Self { dirs, t }
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        self.dirs
            .rows()
            .into_iter()
            .zip(self.t)
            .all(|(u, &t)| dot(u.as_slice().expect("standard layout"), y) >= t)
    }

    /// Indices of the rows of `points` inside every half-space. The last
    /// violated constraint is tried first on the next point, which makes
    /// rejection cheap on a lattice.
    pub fn filter(&self, points: ArrayView2<f64>) -> Vec<usize> {
        let m = self.t.len();
        let dirs: Vec<&[f64]> = self
            .dirs
            .rows()
            .into_iter()
            .map(|r| r.to_slice().expect("standard layout"))
            .collect();
        let mut hot = 0usize;
        let mut out = Vec::new();
        let mut buf = vec![0.0; points.ncols()];
        for (i, row) in points.rows().into_iter().enumerate() {
            let y: &[f64] = match row.as_slice() {
                Some(s) => s,
                None => {
                    buf.iter_mut().zip(row.iter()).for_each(|(b, v)| *b = *v);
                    &buf
                }
            };
            if dot(dirs[hot], y) < self.t[hot] {
                continue;
            }
            let mut ok = true;
            for k in 0..m {
                if dot(dirs[k], y) < self.t[k] {
                    hot = k;
                    ok = false;
                    break;
                }
            }
            if ok {
                out.push(i);
            }
        }
        out
    }
}

/// Response-space regions from a fitted model on a fixed lattice.
pub struct NpdqrRegions<'a> {
    pub model: &'a NpdqrModel,
    pub points: Matrix,
}

impl<'a> NpdqrRegions<'a> {
    pub fn new(model: &'a NpdqrModel, grid: &Grid) -> Self {
        Self { model, points: grid.points() }
    }
}

impl RegionProvider for NpdqrRegions<'_> {
    fn response_dim(&self) -> usize {
        self.model.response_dim()
    }

    fn region(&self, x: &[f64]) -> Result<DiscreteRegion> {
        self.model.extract_from_points(x, self.points.view(), Space::Response)
    }
}
