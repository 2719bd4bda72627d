//! Per-dimension quantile regression baseline with rectangular regions.
//!
//! Each response coordinate gets a lower and an upper quantile net. The
//! rectangle is calibrated CQR-style: scores are the largest per-coordinate
//! exceedance and every interval is widened by the calibrated offset `Q`.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, Loss, MlpModel, MlpSpec, SupervisedObjective, TrainConfig, TrainHistory};
use crate::numerics::{empirical_quantile, Matrix};
use crate::regions::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Use levels `α/d` and `1 − α/d` instead of `α/(2d)` and `1 − α/(2d)`.
    pub wide_levels: bool,
    pub train: TrainConfig,
}

impl Default for NaiveConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64; 3],
            dropout: 0.0,
            wide_levels: false,
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

/// Per-dimension quantile levels `(lo, hi)`.
pub fn levels(alpha: f64, d: usize, wide: bool) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) || d == 0 {
        return Err(invalid("alpha must be in (0, 1) and d positive"));
    }
    let beta = if wide { alpha / d as f64 } else { alpha / (2 * d) as f64 };
    Ok((beta, 1.0 - beta))
}

/// Axis-aligned box `∏ [lower_j, upper_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rectangle {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.len() == self.dim() && y.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| lo <= v && v <= hi)
    }

    /// Lebesgue volume; zero if any interval is inverted.
    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| (hi - lo).max(0.0)).product()
    }

    /// Number of grid cell centers inside the box, counted per axis.
    pub fn grid_area(&self, grid: &Grid) -> Result<usize> {
        if grid.dim() != self.dim() {
            return Err(invalid("grid and rectangle dimensions differ"));
        }
        let mut total = 1usize;
        for j in 0..self.dim() {
            let count = (0..grid.cells[j])
                .filter(|&i| {
                    let c = grid.low[j] + (i as f64 + 0.5) * grid.step(j);
                    self.lower[j] <= c && c <= self.upper[j]
                })
                .count();
            total *= count;
        }
        Ok(total)
    }

    pub fn widened(&self, q: f64) -> Self {
        Self {
            lower: self.lower.iter().map(|v| v - q).collect(),
            upper: self.upper.iter().map(|v| v + q).collect(),
        }
    }
}

/// `max_j max(lo_j − y_j, y_j − hi_j)`.
pub fn cqr_score(lower: &[f64], upper: &[f64], y: &[f64]) -> Result<f64> {
    if lower.len() != y.len() || upper.len() != y.len() || y.is_empty() {
        return Err(invalid("score needs bounds and response of one nonzero length"));
    }
    Ok(y.iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (lo, hi))| (lo - v).max(v - hi))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// 1-based index of the calibrated score: `⌈(1−α)(n+1)⌉`.
pub fn calibration_index(alpha: f64, n: usize) -> Result<usize> {
    let k = ((1.0 - alpha) * (n as f64 + 1.0) - 1e-9).ceil() as usize;
    if k == 0 || k > n {
        return Err(Error::CalibrationSetTooSmall { index: k, n });
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveModel {
    pub lower: Vec<MlpModel>,
    pub upper: Vec<MlpModel>,
    pub levels: (f64, f64),
    /// Calibration offset; zero until calibrated.
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveCalibration {
    pub alpha: f64,
    pub n_cal: usize,
    pub index: usize,
    pub q: f64,
}

pub fn fit(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    val_xs: ArrayView2<f64>,
    val_ys: ArrayView2<f64>,
    alpha: f64,
    config: &NaiveConfig,
) -> Result<(NaiveModel, Vec<TrainHistory>)> {
    let d = ys.ncols();
    let (lo, hi) = levels(alpha, d, config.wide_levels)?;
    let spec = MlpSpec {
        input: xs.ncols(),
        hidden: config.hidden.clone(),
        output: 1,
        dropout: config.dropout,
        batch_norm: false,
        leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
    };
    let mut lower = Vec::with_capacity(d);
    let mut upper = Vec::with_capacity(d);
    let mut histories = Vec::with_capacity(2 * d);
    for j in 0..d {
        let target = ys.slice(ndarray::s![.., j..j + 1]);
        let val_target = val_ys.slice(ndarray::s![.., j..j + 1]);
        for (side, level) in [lo, hi].into_iter().enumerate() {
            let objective = SupervisedObjective {
                inputs: xs.view(),
                targets: target.view(),
                val_inputs: val_xs.view(),
                val_targets: val_target.view(),
                loss: Loss::Pinball(vec![level]),
            };
            let train = TrainConfig {
                seed: config.train.seed.wrapping_add((2 * j + side) as u64),
                ..config.train.clone()
            };
            let (net, history) = nn::fit_supervised(spec.clone(), &objective, &train)?;
            histories.push(history);
            if side == 0 {
                lower.push(net);
            } else {
                upper.push(net);
            }
        }
    }
    Ok((NaiveModel { lower, upper, levels: (lo, hi), q: 0.0 }, histories))
}

impl NaiveModel {
    pub fn response_dim(&self) -> usize {
        self.lower.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.lower[0].input_width()
    }

    /// Uncalibrated per-row bounds, each `n × d`.
    pub fn base_bounds(&self, xs: ArrayView2<f64>) -> Result<(Matrix, Matrix)> {
        if xs.ncols() != self.feature_dim() {
            return Err(invalid("feature width does not match the model"));
        }
        let stack = |nets: &[MlpModel]| {
            let mut out = Array2::zeros((xs.nrows(), nets.len()));
            for (j, net) in nets.iter().enumerate() {
                out.column_mut(j).assign(&net.predict(xs).column(0));
            }
            out
        };
        Ok((stack(&self.lower), stack(&self.upper)))
    }

    /// Calibrated rectangles for every row of `xs`.
    pub fn regions(&self, xs: ArrayView2<f64>) -> Result<Vec<Rectangle>> {
        let (lo, hi) = self.base_bounds(xs)?;
        Ok((0..xs.nrows())
            .map(|i| Rectangle { lower: lo.row(i).to_vec(), upper: hi.row(i).to_vec() }.widened(self.q))
            .collect())
    }

    pub fn region(&self, x: &[f64]) -> Result<Rectangle> {
        let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| invalid(e.to_string()))?;
        Ok(self.regions(xs)?.remove(0))
    }

    pub fn scores(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Result<Vec<f64>> {
        if xs.nrows() != ys.nrows() || ys.ncols() != self.response_dim() {
            return Err(invalid("score shapes do not match the model"));
        }
        let (lo, hi) = self.base_bounds(xs)?;
        (0..xs.nrows())
            .map(|i| cqr_score(&lo.row(i).to_vec(), &hi.row(i).to_vec(), &ys.row(i).to_vec()))
            .collect()
    }

    /// Sets `Q` to the `⌈(1−α)(n+1)⌉`-th smallest calibration score.
    pub fn calibrate(&mut self, xs: ArrayView2<f64>, ys: ArrayView2<f64>, alpha: f64) -> Result<NaiveCalibration> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("alpha must be in (0, 1)"));
        }
        let scores = self.scores(xs, ys)?;
        let index = calibration_index(alpha, scores.len())?;
        self.q = empirical_quantile(&scores, index)?;
        Ok(NaiveCalibration { alpha, n_cal: scores.len(), index, q: self.q })
    }

    pub fn contains(&self, xs: ArrayView2<f64>, ys: ArrayView2<f64>) -> Result<Vec<bool>> {
        let rects = self.regions(xs)?;
        Ok(rects.iter().zip(ys.rows()).map(|(r, y)| r.contains(&y.to_vec())).collect())
    }

    /// Writes `lower_<j>.json`, `upper_<j>.json` and `manifest.json` into `dir`.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (j, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            lo.save_json(&dir.join(format!("lower_{j}.json")))?;
            hi.save_json(&dir.join(format!("upper_{j}.json")))?;
        }
        let manifest = Manifest { d: self.response_dim(), levels: self.levels, q: self.q };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut lower = Vec::with_capacity(m.d);
        let mut upper = Vec::with_capacity(m.d);
        for j in 0..m.d {
            lower.push(MlpModel::load_json(&dir.join(format!("lower_{j}.json")))?);
            upper.push(MlpModel::load_json(&dir.join(format!("upper_{j}.json")))?);
        }
        Ok(Self { lower, upper, levels: m.levels, q: m.q })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    d: usize,
    levels: (f64, f64),
    q: f64,
}
