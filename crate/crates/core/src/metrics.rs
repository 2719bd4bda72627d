//! Evaluation metrics: marginal coverage, cluster-conditional coverage
//! deviation (ΔCoverage) over k-means clusters, and across-seed summaries.
//!
//! Everything here works on plain hit vectors (`hits[i]` is true when test row
//! `i` lies in its region), so the same code serves every method.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{squared_distance, Rng};
use crate::par;

/// Fraction of rows whose response is covered.
pub fn coverage(hits: &[bool]) -> Result<f64> {
    if hits.is_empty() {
        return Err(invalid("coverage needs at least one test row"));
    }
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squares.
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.k()];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// Labels for new rows by nearest centroid.
    pub fn assign(&self, x: ArrayView2<f64>) -> Vec<usize> {
        assign_nearest(x, &self.centroids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Every cluster must hold at least this fraction of rows.
    pub min_fraction: f64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 3,
            restarts: 50,
            max_iters: 300,
            min_fraction: 0.2,
        }
    }
}

fn row(x: ArrayView2<f64>, i: usize) -> Vec<f64> {
    x.row(i).to_vec()
}

// ties go to the lower centroid index
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_nearest(x: ArrayView2<f64>, centroids: &[Vec<f64>]) -> Vec<usize> {
    par::map_range(x.nrows(), |i| nearest(&row(x, i), centroids).0)
}

fn inertia(x: ArrayView2<f64>, centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(&row(x, i), &centroids[l]))
        .sum()
}

/// k-means++ seeding.
pub fn kmeans_plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut centroids = vec![row(x, rng.below(n))];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(&row(x, i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.below(n)
        };
        let c = row(x, pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(&row(x, i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations from the given centroids until the labels stop changing.
/// Returns the assignment and the objective after every iteration.
///
/// A centroid that loses all its rows keeps its position. Coincident
/// centroids are merged at the end, so the result may hold fewer than `k`
/// clusters but never an empty one.
pub fn lloyd(x: ArrayView2<f64>, init: Vec<Vec<f64>>, max_iters: usize) -> (ClusterAssignment, Vec<f64>) {
    let p = x.ncols();
    let mut centroids = init;
    let mut labels = assign_nearest(x, &centroids);
    let mut history = vec![inertia(x, &centroids, &labels)];
    for _ in 0..max_iters {
        let k = centroids.len();
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next = assign_nearest(x, &centroids);
        history.push(inertia(x, &centroids, &next));
        if next == labels {
            break;
        }
        labels = next;
    }
    let assignment = compact(x, centroids, labels);
    (assignment, history)
}

// drop centroids that own no rows and relabel densely
fn compact(x: ArrayView2<f64>, centroids: Vec<Vec<f64>>, labels: Vec<usize>) -> ClusterAssignment {
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for &l in &labels {
        if remap[l] == usize::MAX {
            remap[l] = kept.len();
            kept.push(l);
        }
    }
    kept.sort_unstable();
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let centroids: Vec<Vec<f64>> = kept.iter().map(|&j| centroids[j].clone()).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| remap[l]).collect();
    let inertia = inertia(x, &centroids, &labels);
    ClusterAssignment {
        centroids,
        labels,
        inertia,
    }
}

/// k-means with restarts until every cluster holds at least
/// `min_fraction` of the rows.
pub fn kmeans(x: ArrayView2<f64>, config: &KmeansConfig, seed: u64) -> Result<ClusterAssignment> {
    let n = x.nrows();
    if config.k == 0 || n < config.k {
        return Err(invalid(format!("k-means needs 1 <= k <= n, got k={} n={n}", config.k)));
    }
    if config.restarts == 0 {
        return Err(invalid("k-means needs at least one restart"));
    }
    if !(0.0..=1.0).contains(&config.min_fraction) {
        return Err(invalid("minimum cluster fraction must be in [0, 1]"));
    }
    let need = (config.min_fraction * n as f64).ceil() as usize;
    let mut best: Option<(usize, ClusterAssignment)> = None;
    for restart in 0..config.restarts {
        let mut rng = Rng::derive(seed, restart as u64);
        let init = kmeans_plus_plus(x, config.k, &mut rng);
        let (a, _) = lloyd(x, init, config.max_iters);
        let smallest = if a.k() < config.k { 0 } else { a.sizes().into_iter().min().unwrap_or(0) };
        if a.k() == config.k && smallest >= need {
            return Ok(a);
        }
        if best.as_ref().map_or(true, |(s, _)| smallest > *s) {
            best = Some((smallest, a));
        }
    }
    Err(Error::ConstraintUnsatisfied {
        restarts: config.restarts,
        best: Box::new(best.expect("at least one restart").1),
    })
}

/// Coverage within each of `k` clusters.
pub fn cluster_coverages(hits: &[bool], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    if hits.len() != labels.len() {
        return Err(invalid("hits and labels differ in length"));
    }
    let mut covered = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (&h, &l) in hits.iter().zip(labels) {
        if l >= k {
            return Err(invalid(format!("label {l} out of range for k={k}")));
        }
        counts[l] += 1;
        covered[l] += h as usize;
    }
    counts
        .iter()
        .zip(&covered)
        .enumerate()
        .map(|(j, (&n, &c))| if n == 0 { Err(Error::EmptyCluster(j)) } else { Ok(c as f64 / n as f64) })
        .collect()
}

/// Mean absolute deviation of per-cluster coverage from `1 − alpha`.
pub fn delta_coverage_from(per_cluster: &[f64], alpha: f64) -> f64 {
    let target = 1.0 - alpha;
    per_cluster.iter().map(|c| (c - target).abs()).sum::<f64>() / per_cluster.len() as f64
}

pub fn delta_coverage(hits: &[bool], labels: &[usize], k: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha must be in (0, 1)"));
    }
    Ok(delta_coverage_from(&cluster_coverages(hits, labels, k)?, alpha))
}

/// Mean and between-run standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    /// Standard error uses the sample standard deviation; one value gives 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Some(Self { mean, se })
    }
}

/// Metrics of one (method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub coverage: f64,
    /// Mean region area over test rows, in grid cells.
    pub area: f64,
    pub cluster_coverages: Vec<f64>,
    pub delta_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub coverage: MeanSe,
    pub area: MeanSe,
    /// Per-cluster coverage averaged over seeds.
    pub cluster_coverages: Vec<f64>,
    pub delta_coverage: MeanSe,
    pub seeds: Vec<u64>,
}

impl EvaluationReport {
    pub fn aggregate(method: &str, cells: &[SeedMetrics]) -> Result<Self> {
        let pick = |f: fn(&SeedMetrics) -> f64| MeanSe::of(&cells.iter().map(f).collect::<Vec<_>>());
        let coverage = pick(|c| c.coverage).ok_or_else(|| invalid("no successful seeds to aggregate"))?;
        let k = cells.iter().map(|c| c.cluster_coverages.len()).max().unwrap_or(0);
        let cluster_coverages = (0..k)
            .map(|j| {
                let v: Vec<f64> = cells.iter().filter_map(|c| c.cluster_coverages.get(j).copied()).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        Ok(Self {
            method: method.to_string(),
            coverage,
            area: pick(|c| c.area).expect("nonempty"),
            cluster_coverages,
            delta_coverage: pick(|c| c.delta_coverage).expect("nonempty"),
            seeds: cells.iter().map(|c| c.seed).collect(),
        })
    }
}
