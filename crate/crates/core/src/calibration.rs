//! Distance-based conformal calibration of point-set regions.
//!
//! A discrete region `R(x)` is first thickened into the base body
//! `S^γ(x) = {y : d(y, R(x)) ≤ γ}` with `γ = γ_init(R(x))`. If the base bodies
//! undercover the calibration set the region is grown (`Grow`): the score is
//! the distance from `Y_i` to `R(X_i)`. Otherwise it is shrunk (`Shrink`): the
//! complement carrier is every measurement-grid cell farther than the
//! threshold from the region plus the outside of the grid box, the score is
//! the distance from `Y_i` to that carrier, and a point is kept when its
//! distance to the carrier is at least `γ_cal`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{empirical_quantile, squared_distance};
use crate::par;
use crate::regions::{within, Grid, KdTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Response,
    Latent,
}

/// Finite point set in response or latent space produced for input `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRegion {
    pub points: Array2<f64>,
    pub space: Space,
    pub x: Vec<f64>,
}

impl DiscreteRegion {
    pub fn new(points: Array2<f64>, space: Space, x: Vec<f64>) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("region points must be finite"));
        }
        Ok(Self {
            points: points.as_standard_layout().into_owned(),
            space,
            x,
        })
    }

    pub fn empty(dim: usize, space: Space, x: Vec<f64>) -> Self {
        Self {
            points: Array2::zeros((0, dim)),
            space,
            x,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Anything that maps an input to a discrete response-space region.
pub trait RegionProvider: Sync {
    fn response_dim(&self) -> usize;
    fn region(&self, x: &[f64]) -> Result<DiscreteRegion>;
}

/// Fraction of the nearest-neighbor spacing distribution used for `γ_init`.
pub const GAMMA_INIT_QUANTILE: f64 = 0.9;

/// The `⌈0.9·m⌉`-th smallest nearest-neighbor distance inside the region.
pub fn gamma_init(region: &DiscreteRegion) -> Result<f64> {
    gamma_init_from_tree(&KdTree::from_view(region.points.view()))
}

fn gamma_init_from_tree(tree: &KdTree) -> Result<f64> {
    let m = tree.len();
    if m < 2 {
        return Err(Error::DegenerateRegion { size: m });
    }
    let nn = tree.nearest_neighbor_distances();
    let k = ceil_index(GAMMA_INIT_QUANTILE * m as f64).clamp(1, m);
    empirical_quantile(&nn, k)
}

/// `d(y, region) ≤ γ`; an empty region contains nothing.
pub fn base_contains(region: &DiscreteRegion, y: &[f64], gamma: f64) -> bool {
    region
        .points
        .rows()
        .into_iter()
        .any(|a| within(squared_distance(a.as_slice().expect("standard layout"), y), gamma))
}

/// Ceiling that ignores round-off just above an integer.
fn ceil_index(v: f64) -> usize {
    (v - 1e-9).ceil().max(0.0) as usize
}

fn floor_index(v: f64) -> usize {
    (v + 1e-9).floor().max(0.0) as usize
}

/// 1-based order statistic used for `γ_cal` in the grow case.
pub fn grow_index(n: usize, alpha: f64) -> usize {
    ceil_index((n as f64 + 1.0) * (1.0 - alpha))
}

/// 1-based order statistic used for `γ_cal` in the shrink case.
pub fn shrink_index(n: usize, alpha: f64) -> usize {
    floor_index((n as f64 + 1.0) * alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    Grow,
    Shrink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub alpha: f64,
    /// Measurement grid in response space; also carries the shrink complement.
    pub grid: Grid,
    /// Stand-in location for empty regions when growing.
    pub anchor: Vec<f64>,
}

impl CalibrationConfig {
    /// Anchor at the grid center.
    pub fn new(alpha: f64, grid: Grid) -> Self {
        let anchor = grid.center();
        Self { alpha, grid, anchor }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GammaStats {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    /// Regions with fewer than two points.
    pub degenerate: usize,
}

/// Frozen outcome of calibration; answers membership queries for any region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedRule {
    pub mode: CalibrationMode,
    pub alpha: f64,
    pub n_cal: usize,
    pub c_init: f64,
    pub gamma_init: GammaStats,
    /// Distance beyond which grid cells form the shrink complement.
    pub gamma_threshold: f64,
    pub gamma_cal: f64,
    pub grid: Grid,
    pub anchor: Vec<f64>,
}

/// Serialized summary of a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: CalibrationMode,
    pub c_init: f64,
    pub gamma_init: GammaStats,
    pub gamma_threshold: f64,
    pub gamma_cal: f64,
    pub n_cal: usize,
    pub alpha: f64,
}

impl CalibratedRule {
    pub fn report(&self) -> CalibrationReport {
        CalibrationReport {
            mode: self.mode,
            c_init: self.c_init,
            gamma_init: self.gamma_init,
            gamma_threshold: self.gamma_threshold,
            gamma_cal: self.gamma_cal,
            n_cal: self.n_cal,
            alpha: self.alpha,
        }
    }

    /// Precomputes the search structures for one region.
    pub fn prepare<'a>(&'a self, region: &DiscreteRegion) -> PreparedRegion<'a> {
        let tree = KdTree::from_view(region.points.view());
        let base_mask = match self.mode {
            CalibrationMode::Shrink => Some(self.grid.dilation_mask(region.points.view(), self.gamma_threshold)),
            CalibrationMode::Grow => None,
        };
        PreparedRegion { rule: self, tree, base_mask }
    }

    pub fn contains(&self, region: &DiscreteRegion, y: &[f64]) -> bool {
        self.prepare(region).contains(y)
    }
}

/// A region with the calibrated rule applied.
pub struct PreparedRegion<'a> {
    rule: &'a CalibratedRule,
    tree: KdTree,
    base_mask: Option<Vec<bool>>,
}

impl PreparedRegion<'_> {
    pub fn contains(&self, y: &[f64]) -> bool {
        let rule = self.rule;
        match rule.mode {
            CalibrationMode::Grow => grow_score(&self.tree, &rule.anchor, y) <= rule.gamma_cal,
            CalibrationMode::Shrink => {
                let mask = self.base_mask.as_ref().expect("shrink mask");
                match shrink_score(&self.tree, mask, &rule.grid, rule.gamma_threshold, y) {
                    Some(score) => score >= rule.gamma_cal,
                    None => false,
                }
            }
        }
    }

    /// Number of measurement-grid cells inside the calibrated region.
    pub fn area(&self) -> usize {
        let rule = self.rule;
        let grid = &rule.grid;
        match rule.mode {
            CalibrationMode::Grow => {
                let mask = if self.tree.is_empty() {
                    let anchor = ArrayView2::from_shape((1, rule.anchor.len()), &rule.anchor).expect("anchor row");
                    grid.dilation_mask(anchor, rule.gamma_cal)
                } else {
                    grid.dilation_mask(self.tree.points(), rule.gamma_cal)
                };
                mask.iter().filter(|&&m| m).count()
            }
            CalibrationMode::Shrink => {
                let mask = self.base_mask.as_ref().expect("shrink mask");
                let base: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
                par::count_range(base.len(), |k| {
                    let c = grid.point(base[k]);
                    carrier_distance(mask, grid, &c) >= rule.gamma_cal
                })
            }
        }
    }
}

/// Grow score: distance to the region, or to the anchor if it is empty.
fn grow_score(tree: &KdTree, anchor: &[f64], y: &[f64]) -> f64 {
    if tree.is_empty() {
        squared_distance(anchor, y).sqrt()
    } else {
        tree.min_distance(y).expect("nonempty tree")
    }
}

/// Distance from `y` to the shrink complement; `None` when `y` itself lies
/// in the complement.
fn shrink_score(tree: &KdTree, mask: &[bool], grid: &Grid, threshold: f64, y: &[f64]) -> Option<f64> {
    if !grid.inside_box(y) || !tree.any_within(y, threshold) {
        return None;
    }
    Some(carrier_distance(mask, grid, y))
}

/// `min(distance to the nearest unmasked cell, distance to the box boundary)`.
fn carrier_distance(mask: &[bool], grid: &Grid, y: &[f64]) -> f64 {
    let boundary = grid.boundary_distance(y);
    let cells = nearest_unmasked_sq(mask, grid, y, boundary).sqrt();
    cells.min(boundary)
}

/// Squared distance to the nearest unmasked cell center, searched in growing
/// windows. Stops once `cap` is known to be closer.
fn nearest_unmasked_sq(mask: &[bool], grid: &Grid, y: &[f64], cap: f64) -> f64 {
    let d = grid.dim();
    let min_step = (0..d).map(|j| grid.step(j)).fold(f64::INFINITY, f64::min);
    let full = (0..d).map(|j| grid.high[j] - grid.low[j]).fold(0.0, f64::max) * 2.0;
    let mut radius = min_step;
    let mut p = vec![0.0; d];
    loop {
        let mut best = f64::INFINITY;
        let mut idx: Vec<usize> = Vec::with_capacity(d);
        let mut win: Vec<(usize, usize)> = Vec::with_capacity(d);
        for j in 0..d {
            let s = grid.step(j);
            let max = (grid.cells[j] - 1) as f64;
            let lo = (((y[j] - radius - grid.low[j]) / s - 0.5).floor() - 1.0).clamp(0.0, max) as usize;
            let hi = (((y[j] + radius - grid.low[j]) / s - 0.5).ceil() + 1.0).clamp(0.0, max) as usize;
            win.push((lo, hi));
            idx.push(lo);
        }
        'cells: loop {
            let flat = grid.ravel(&idx);
            if !mask[flat] {
                grid.point_into(flat, &mut p);
                best = best.min(squared_distance(&p, y));
            }
            for j in (0..d).rev() {
                if idx[j] < win[j].1 {
                    idx[j] += 1;
                    continue 'cells;
                }
                idx[j] = win[j].0;
            }
            break;
        }
        if within(best, radius) || radius >= full || radius > cap {
            return best;
        }
        radius *= 2.0;
    }
}

/// Per-row calibration statistics, computed before the mode is known.
struct RowStats {
    gamma: Option<f64>,
    grow_score: f64,
}

/// Runs the calibration procedure over `(xs, ys)`.
pub fn calibrate<P: RegionProvider + ?Sized>(
    provider: &P,
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    config: &CalibrationConfig,
) -> Result<CalibratedRule> {
    let n = xs.nrows();
    if n == 0 || ys.nrows() != n {
        return Err(invalid("calibration needs equally many nonempty x and y rows"));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(invalid(format!("alpha must be in (0, 1), got {}", config.alpha)));
    }
    let d = provider.response_dim();
    if ys.ncols() != d || config.grid.dim() != d || config.anchor.len() != d {
        return Err(invalid("response, grid and anchor dimensions must agree"));
    }

    let regions: Vec<Result<DiscreteRegion>> = par::map_range(n, |i| provider.region(&xs.row(i).to_vec()));
    let regions: Vec<DiscreteRegion> = regions.into_iter().collect::<Result<_>>()?;
    let trees: Vec<KdTree> = par::map_slice(&regions, |r| KdTree::from_view(r.points.view()));
    let stats: Vec<RowStats> = par::map_range(n, |i| {
        let y = ys.row(i).to_vec();
        RowStats {
            gamma: gamma_init_from_tree(&trees[i]).ok(),
            grow_score: grow_score(&trees[i], &config.anchor, &y),
        }
    });

    let good: Vec<f64> = stats.iter().filter_map(|s| s.gamma).collect();
    let degenerate = n - good.len();
    let fallback = if good.is_empty() {
        0.0
    } else {
        empirical_quantile(&good, good.len().div_ceil(2))?
    };
    let gamma_stats = if good.is_empty() {
        GammaStats { degenerate, ..GammaStats::default() }
    } else {
        GammaStats {
            min: good.iter().copied().fold(f64::INFINITY, f64::min),
            median: fallback,
            mean: good.iter().sum::<f64>() / good.len() as f64,
            max: good.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            degenerate,
        }
    };

    let covered = (0..n)
        .filter(|&i| {
            let g = stats[i].gamma.unwrap_or(fallback);
            !trees[i].is_empty() && trees[i].any_within(&ys.row(i).to_vec(), g)
        })
        .count();
    let c_init = covered as f64 / n as f64;
    let alpha = config.alpha;

    let (mode, gamma_cal) = if c_init <= 1.0 - alpha {
        let k = grow_index(n, alpha);
        if k == 0 || k > n {
            return Err(Error::CalibrationSetTooSmall { index: k, n });
        }
        let scores: Vec<f64> = stats.iter().map(|s| s.grow_score).collect();
        (CalibrationMode::Grow, empirical_quantile(&scores, k)?)
    } else {
        let k = shrink_index(n, alpha);
        if k == 0 || k > n {
            return Err(Error::CalibrationSetTooSmall { index: k, n });
        }
        let grid = &config.grid;
        let masks: Vec<Vec<bool>> = par::map_slice(&regions, |r| grid.dilation_mask(r.points.view(), fallback));
        if masks.iter().all(|m| m.iter().all(|&v| v)) {
            return Err(Error::DegenerateComplement);
        }
        let scores: Vec<f64> = par::map_range(n, |i| {
            let y = ys.row(i).to_vec();
            shrink_score(&trees[i], &masks[i], grid, fallback, &y).unwrap_or(0.0)
        });
        (CalibrationMode::Shrink, empirical_quantile(&scores, k)?)
    };

    Ok(CalibratedRule {
        mode,
        alpha,
        n_cal: n,
        c_init,
        gamma_init: gamma_stats,
        gamma_threshold: fallback,
        gamma_cal,
        grid: config.grid.clone(),
        anchor: config.anchor.clone(),
    })
}

/// Fraction of rows whose base body `S^{γ_init}` contains the response.
pub fn initial_coverage<P: RegionProvider + ?Sized>(
    provider: &P,
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
) -> Result<f64> {
    let n = xs.nrows();
    if n == 0 {
        return Err(invalid("empty calibration set"));
    }
    let hits: Vec<Result<bool>> = par::map_range(n, |i| {
        let region = provider.region(&xs.row(i).to_vec())?;
        Ok(match gamma_init(&region) {
            Ok(g) => base_contains(&region, &ys.row(i).to_vec(), g),
            Err(_) => false,
        })
    });
    let mut covered = 0;
    for h in hits {
        covered += h? as usize;
    }
    Ok(covered as f64 / n as f64)
}
