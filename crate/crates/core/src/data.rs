//! Synthetic v-shaped responses, CSV ingestion, seeded splits, z-scoring and
//! PCA.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Linear,
    Nonlinear,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Linear => "linear",
            Setting::Nonlinear => "nonlinear",
        })
    }
}

/// Paired features and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub feature_names: Vec<String>,
    pub response_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let response_names = (0..y.ncols()).map(|j| format!("y{j}")).collect();
        Self::with_names(x, y, feature_names, response_names)
    }

    pub fn with_names(x: Matrix, y: Matrix, feature_names: Vec<String>, response_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(invalid(format!("x has {} rows but y has {}", x.nrows(), y.nrows())));
        }
        if feature_names.len() != x.ncols() || response_names.len() != y.ncols() {
            return Err(invalid("column names do not match matrix widths"));
        }
        Ok(Self { x, y, feature_names, response_names })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            response_names: self.response_names.clone(),
        }
    }
}

/// Sample size used for each synthetic configuration.
pub fn default_n(setting: Setting, p: usize) -> usize {
    match (setting, p) {
        (Setting::Linear, 50) => 80_000,
        (Setting::Linear, 100) => 100_000,
        _ => 20_000,
    }
}

/// Pre-calibration directional coverage levels `(npdqr, stdqr)` for the
/// synthetic configurations.
pub fn default_directional_levels(setting: Setting, d: usize, p: usize) -> (f64, f64) {
    match (setting, d, p) {
        (Setting::Linear, _, _) => (0.95, 0.95),
        (Setting::Nonlinear, 4, 1) => (0.98, 0.93),
        (Setting::Nonlinear, 4, _) => (0.98, 0.95),
        (Setting::Nonlinear, _, _) => (0.95, 0.93),
    }
}

/// Latent draws of one synthetic row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentDraw {
    pub z: f64,
    pub phi: f64,
    pub r: f64,
}

/// Responses of one synthetic row given its features and latent draw.
pub fn synthetic_response(setting: Setting, d: usize, beta: &[f64], x: &[f64], draw: LatentDraw) -> Vec<f64> {
    let bx: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
    let LatentDraw { z, phi, r } = draw;
    let mut y = Vec::with_capacity(d);
    y.push(z / bx + r * phi.cos());
    let mut y1 = 0.5 * (1.0 - z.cos()) + r * phi.sin();
    if setting == Setting::Nonlinear {
        y1 += (x.iter().sum::<f64>() / x.len() as f64).sin();
    }
    y.push(y1);
    if d >= 3 {
        y.push((z / bx).sin());
    }
    if d >= 4 {
        y.push((z / bx).sin().cos() + r * phi.cos() * phi.sin());
    }
    y
}

/// `β ~ U(0,1)^p` scaled to unit L1 norm.
pub fn draw_beta(p: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..p).map(|_| rng.uniform()).collect();
    let norm: f64 = raw.iter().sum();
    raw.iter().map(|b| b / norm).collect()
}

/// Draws `n` rows of the v-shaped synthetic data set.
pub fn gen_synthetic(setting: Setting, d: usize, p: usize, n: usize, seed: u64) -> Result<Dataset> {
    if !(2..=4).contains(&d) {
        return Err(Error::UnsupportedDimension(d));
    }
    if p == 0 || n == 0 {
        return Err(invalid("p and n must be positive"));
    }
    let mut rng = Rng::new(seed);
    let beta = draw_beta(p, &mut rng);
    let mut x = Array2::zeros((n, p));
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let draw = LatentDraw {
            z: rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI),
            phi: rng.uniform_range(0.0, std::f64::consts::TAU),
            r: rng.uniform_range(-0.1, 0.1),
        };
        let xi: Vec<f64> = (0..p).map(|_| rng.uniform_range(0.8, 3.2)).collect();
        let yi = synthetic_response(setting, d, &beta, &xi, draw);
        x.row_mut(i).assign(&Array1::from(xi));
        y.row_mut(i).assign(&Array1::from(yi));
    }
    Dataset::new(x, y)
}

/// Samples `Y | X = x` for a fixed feature vector (used for plots and
/// conditional checks). `beta` must be the data set's coefficients.
pub fn sample_conditional(setting: Setting, d: usize, beta: &[f64], x: &[f64], n: usize, rng: &mut Rng) -> Matrix {
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let draw = LatentDraw {
            z: rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI),
            phi: rng.uniform_range(0.0, std::f64::consts::TAU),
            r: rng.uniform_range(-0.1, 0.1),
        };
        y.row_mut(i).assign(&Array1::from(synthetic_response(setting, d, beta, x, draw)));
    }
    y
}

/// The coefficients `gen_synthetic` draws for `(p, seed)`.
pub fn synthetic_beta(p: usize, seed: u64) -> Vec<f64> {
    draw_beta(p, &mut Rng::new(seed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Split shares in thousandths: train, calibration, validation, test.
const SPLIT_PERMILLE: [usize; 4] = [384, 256, 160, 200];

/// Part sizes: floor of each share, leftover rows to the largest fractional
/// parts (ties to the earlier part).
pub fn split_sizes(n: usize) -> [usize; 4] {
    let mut sizes = SPLIT_PERMILLE.map(|s| n * s / 1000);
    let rem = SPLIT_PERMILLE.map(|s| n * s % 1000);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[k] += 1;
        left -= 1;
    }
    sizes
}

/// Seeded permutation cut into train / calibration / validation / test.
pub fn split(n: usize, seed: u64) -> Result<SplitIndices> {
    if n < 10 {
        return Err(invalid(format!("need at least 10 rows to split, got {n}")));
    }
    let perm = Rng::derive(seed, 0x73706c6974).permutation(n);
    let [a, b, c, _] = split_sizes(n);
    Ok(SplitIndices {
        train: perm[..a].to_vec(),
        calibration: perm[a..a + b].to_vec(),
        validation: perm[a + b..a + b + c].to_vec(),
        test: perm[a + b + c..].to_vec(),
        seed,
    })
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation over `rows`.
    pub fn fit(m: ArrayView2<f64>, rows: &[usize], names: &[String]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(invalid("standardization needs at least 2 fitting rows"));
        }
        let sub = m.select(Axis(0), rows);
        let n = rows.len() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut std = Vec::with_capacity(m.ncols());
        for (j, col) in sub.columns().into_iter().enumerate() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            if !(var > 0.0) {
                let column = names.get(j).cloned().unwrap_or_else(|| j.to_string());
                return Err(Error::ZeroVariance { column });
            }
            mean.push(mu);
            std.push(var.sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: ArrayView2<f64>) -> Matrix {
        let mut out = m.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }

    pub fn invert(&self, m: ArrayView2<f64>) -> Matrix {
        let mut out = m.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        out
    }

    pub fn apply_row(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(j, x)| (x - self.mean[j]) / self.std[j]).collect()
    }

    pub fn invert_row(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(j, x)| x * self.std[j] + self.mean[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub x: Standardizer,
    pub y: Standardizer,
}

/// Standardizes every column of `x` and `y` with statistics from `fit_rows`.
pub fn zscore_fit_apply(dataset: &Dataset, fit_rows: &[usize]) -> Result<(Dataset, NormalizationStats)> {
    let sx = Standardizer::fit(dataset.x.view(), fit_rows, &dataset.feature_names)?;
    let sy = Standardizer::fit(dataset.y.view(), fit_rows, &dataset.response_names)?;
    let out = Dataset {
        x: sx.apply(dataset.x.view()),
        y: sy.apply(dataset.y.view()),
        feature_names: dataset.feature_names.clone(),
        response_names: dataset.response_names.clone(),
    };
    Ok((out, NormalizationStats { x: sx, y: sy }))
}

/// Principal axes of a centered design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `p × k`, columns are unit principal directions.
    pub basis: Array2<f64>,
    /// Variance along each kept direction, nonincreasing.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(x: ArrayView2<f64>, k: usize) -> Result<Self> {
        let (n, p) = x.dim();
        if k == 0 || k > n.min(p) {
            return Err(invalid(format!("PCA rank {k} must be in 1..={}", n.min(p))));
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let centered = &x - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[(i, j)]));
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Array2::zeros((p, k));
        let mut explained = Vec::with_capacity(k);
        for (c, &o) in order.iter().take(k).enumerate() {
            // deterministic sign: largest-magnitude loading positive
            let col = eig.eigenvectors.column(o);
            let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for r in 0..p {
                basis[(r, c)] = sign * col[r];
            }
            explained.push(eig.eigenvalues[o].max(0.0));
        }
        Ok(Self {
            mean: mean.to_vec(),
            basis,
            explained_variance: explained,
        })
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Matrix {
        let mean = Array1::from(self.mean.clone());
        (&x - &mean).dot(&self.basis)
    }

    pub fn reconstruct(&self, z: ArrayView2<f64>) -> Matrix {
        let mean = Array1::from(self.mean.clone());
        z.dot(&self.basis.t()) + &mean
    }
}

/// Projects `x` on its top-`k` principal directions.
pub fn pca_reduce(x: ArrayView2<f64>, k: usize) -> Result<(Matrix, Pca)> {
    let pca = Pca::fit(x, k)?;
    Ok((pca.transform(x), pca))
}

/// Reads a headered numeric CSV; `response_columns` (by header name) become
/// `y`, every other column `x`.
pub fn load_csv(path: &Path, response_columns: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut y_idx = Vec::with_capacity(response_columns.len());
    for name in response_columns {
        let j = headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 0,
            column: name.clone(),
            message: "response column not found in header".into(),
        })?;
        y_idx.push(j);
    }
    if y_idx.is_empty() {
        return Err(invalid("at least one response column is required"));
    }
    let x_idx: Vec<usize> = (0..headers.len()).filter(|j| !y_idx.contains(j)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let cell = |j: usize| -> Result<f64> {
            let raw = record[j].trim();
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("not a finite number: {raw:?}"),
            })
        };
        for &j in &x_idx {
            xs.push(cell(j)?);
        }
        for &j in &y_idx {
            ys.push(cell(j)?);
        }
        rows += 1;
    }
    let x = Array2::from_shape_vec((rows, x_idx.len()), xs).map_err(|e| invalid(e.to_string()))?;
    let y = Array2::from_shape_vec((rows, y_idx.len()), ys).map_err(|e| invalid(e.to_string()))?;
    Dataset::with_names(
        x,
        y,
        x_idx.iter().map(|&j| headers[j].clone()).collect(),
        y_idx.iter().map(|&j| headers[j].clone()).collect(),
    )
}

/// Writes features then responses with a header row. Floats use Rust's
/// shortest round-trip formatting, so reading back is bit-exact.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset.feature_names.iter().chain(&dataset.response_names))?;
    for i in 0..dataset.len() {
        let fields: Vec<String> = dataset
            .x
            .row(i)
            .iter()
            .chain(dataset.y.row(i).iter())
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::f64::consts::PI;

    #[test]
    fn forced_draws() {
        let zero = LatentDraw { z: 0.0, phi: 0.0, r: 0.0 };
        assert_eq!(synthetic_response(Setting::Linear, 2, &[1.0], &[2.0], zero), vec![0.0, 0.0]);
        let half = LatentDraw { z: PI / 2.0, phi: 0.0, r: 0.0 };
        let y = synthetic_response(Setting::Linear, 2, &[1.0], &[1.7], half);
        assert_abs_diff_eq!(y[0], PI / (2.0 * 1.7), epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.5, epsilon = 1e-15);
        let y = synthetic_response(Setting::Linear, 4, &[1.0], &[1.0], zero);
        assert_eq!((y[2], y[3]), (0.0, 1.0));
        let y = synthetic_response(Setting::Nonlinear, 2, &[1.0], &[1.5], zero);
        assert_eq!(y[1], 1.5f64.sin());
    }

    #[test]
    fn generator_shapes_and_determinism() {
        let a = gen_synthetic(Setting::Nonlinear, 3, 2, 100, 4).unwrap();
        assert_eq!((a.p(), a.d(), a.len()), (2, 3, 100));
        assert_eq!(a, gen_synthetic(Setting::Nonlinear, 3, 2, 100, 4).unwrap());
        assert!(a.x.iter().all(|&v| (0.8..3.2).contains(&v)));
        assert!(gen_synthetic(Setting::Linear, 5, 1, 10, 0).is_err());
        assert!(gen_synthetic(Setting::Linear, 2, 1, 0, 0).is_err());
    }

    #[test]
    fn beta_is_l1_normalized() {
        let b = synthetic_beta(10, 3);
        assert_abs_diff_eq!(b.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_eq!(synthetic_beta(1, 9), vec![1.0]);
    }

    #[test]
    fn linear_y1_mean() {
        let ds = gen_synthetic(Setting::Linear, 2, 1, 100_000, 1).unwrap();
        let m = ds.y.column(1).mean().unwrap();
        assert!((m - 0.5).abs() <= 0.01, "{m}");
    }

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(1000), [384, 256, 160, 200]);
        assert_eq!(split_sizes(10), [4, 2, 2, 2]);
        assert_eq!(split_sizes(20000), [7680, 5120, 3200, 4000]);
        for n in 10..500 {
            let s = split_sizes(n);
            assert_eq!(s.iter().sum::<usize>(), n);
            for (k, &share) in SPLIT_PERMILLE.iter().enumerate() {
                assert!((s[k] as f64 - n as f64 * share as f64 / 1000.0).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn split_partitions_rows() {
        let s = split(1000, 5).unwrap();
        let mut all: Vec<usize> = [&s.train, &s.calibration, &s.validation, &s.test]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split(1000, 5).unwrap());
        assert_ne!(s.train, split(1000, 6).unwrap().train);
        assert!(split(9, 0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let x = array![[0.0], [2.0], [5.0], [5.0]];
        let y = array![[1.0], [3.0], [7.0], [7.0]];
        let mut ds = Dataset::new(x, y).unwrap();
        let (norm, stats) = zscore_fit_apply(&ds, &[0, 1]).unwrap();
        assert_eq!(stats.x.mean, vec![1.0]);
        assert_eq!(stats.x.std, vec![1.0]);
        assert_eq!(norm.x[(2, 0)], 4.0);
        let back = stats.y.invert(norm.y.view());
        for (a, b) in back.iter().zip(ds.y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        ds.x[(1, 0)] = 0.0;
        assert!(matches!(zscore_fit_apply(&ds, &[0, 1]), Err(Error::ZeroVariance { column }) if column == "x0"));
        // constants outside the fitting rows are fine
        assert!(zscore_fit_apply(&ds, &[0, 2, 3]).is_ok());
    }

    /// Leading eigenpair of a symmetric matrix by power iteration with
    /// deflation.
    fn power_iteration(cov: &Array2<f64>, k: usize) -> Vec<f64> {
        let p = cov.nrows();
        let mut a = cov.clone();
        let mut out = Vec::new();
        for c in 0..k {
            let mut v = Array1::from_shape_fn(p, |i| 1.0 + (i + c) as f64 * 0.01);
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let w = a.dot(&v);
                let norm = w.dot(&w).sqrt();
                let next = &w / norm;
                lambda = next.dot(&a.dot(&next));
                let diff = (&next - &v).mapv(f64::abs).sum();
                v = next;
                if diff < 1e-14 {
                    break;
                }
            }
            out.push(lambda);
            let outer = v.clone().insert_axis(Axis(1)).dot(&v.clone().insert_axis(Axis(0)));
            a = a - outer * lambda;
        }
        out
    }

    #[test]
    fn pca_matches_power_iteration() {
        let mut rng = Rng::new(17);
        let scales: Vec<f64> = (0..20).map(|j| 3.0 / (1.0 + j as f64)).collect();
        let x = Array2::from_shape_fn((200, 20), |(_, j)| scales[j] * rng.normal());
        let pca = Pca::fit(x.view(), 5).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let c = &x - &mean;
        let cov = c.t().dot(&c) / 200.0;
        let oracle = power_iteration(&cov, 5);
        for (a, b) in pca.explained_variance.iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_rank_one_is_exact() {
        let x = Array2::from_shape_fn((30, 4), |(i, j)| (i as f64 - 3.0) * (j as f64 + 1.0));
        let pca = Pca::fit(x.view(), 1).unwrap();
        let back = pca.reconstruct(pca.transform(x.view()).view());
        for (a, b) in back.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        assert!(Pca::fit(x.view(), 5).is_err());
        assert!(Pca::fit(x.view(), 0).is_err());
    }

    #[test]
    fn pca_full_basis_preserves_gram() {
        let mut rng = Rng::new(2);
        let x = Array2::from_shape_fn((50, 4), |_| rng.normal());
        let (z, pca) = pca_reduce(x.view(), 4).unwrap();
        let mean = Array1::from(pca.mean.clone());
        let c = &x - &mean;
        let g1 = c.dot(&c.t());
        let g2 = z.dot(&z.t());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic(Setting::Nonlinear, 2, 1, 50, 8).unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, &["y0".into(), "y1".into()]).unwrap();
        assert_eq!(back, ds);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,b,c\n1,2,3\n4,oops,6\n").unwrap();
        let err = load_csv(&bad, &["b".into(), "c".into()]).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, ref column, .. } if column == "b"), "{err}");
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
        let ds = load_csv(&ok, &["b".into(), "c".into()]).unwrap();
        assert_eq!(ds.x, array![[1.0], [4.0]]);
        assert_eq!(ds.y, array![[2.0, 3.0], [5.0, 6.0]]);
        assert!(matches!(load_csv(&ok, &["zz".into()]), Err(Error::Parse { .. })));
    }
}
