//! Deterministic math substrate: seeded random streams, order statistics,
//! the normal / chi-squared special functions and the analytic coverage of a
//! directional quantile region under a standard normal response.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::{erf, gamma};

use crate::error::{Error, Result};

/// Dense row-major real matrix.
pub type Matrix = Array2<f64>;

/// Seeded random stream (ChaCha8, counter based).
///
/// Normal draws use the Box–Muller transform so that streams are portable
/// across platforms and library versions of the normal sampler.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream keyed by `(seed, tag)`.
    pub fn derive(seed: u64, tag: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform on `[low, high)`.
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.inner);
        idx
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k.min(n)).into_vec()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `k`-th smallest value (1-based).
pub fn empirical_quantile(values: &[f64], k: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empirical_quantile of an empty list".into()));
    }
    if k == 0 || k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "order statistic {k} out of range 1..={}",
            values.len()
        )));
    }
    let mut buf = values.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt()
}

/// Inverse standard normal CDF, `-√2 · erfc⁻¹(2p)`.
pub fn std_normal_inv_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("inverse normal CDF needs p in (0, 1), got {p}")));
    }
    Ok(-std::f64::consts::SQRT_2 * erf::erfc_inv(2.0 * p))
}

/// Chi-squared CDF with `r` degrees of freedom (regularized lower incomplete
/// gamma `P(r/2, x/2)`).
pub fn chi_squared_cdf(x: f64, r: usize) -> Result<f64> {
    if r < 1 {
        return Err(Error::Domain("chi-squared needs at least 1 degree of freedom".into()));
    }
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi-squared CDF needs x >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma::gamma_lr(r as f64 / 2.0, x / 2.0))
}

/// Coverage of the directional quantile region `{z : uᵀz ≥ Φ⁻¹(α) ∀u}` when
/// `Z ~ N(0, I_r)`: the region is the ball of radius `-Φ⁻¹(α)`, so the
/// coverage is `F_{χ²_r}(Φ⁻¹(α)²)`.
pub fn dqr_theoretical_coverage(alpha: f64, r: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::Domain(format!("directional level alpha must be in (0, 0.5], got {alpha}")));
    }
    if r < 1 {
        return Err(Error::Domain("dimension must be at least 1".into()));
    }
    let z = std_normal_inv_cdf(alpha)?;
    chi_squared_cdf(z * z, r)
}

/// Monte-Carlo estimate of [`dqr_theoretical_coverage`] from `n` Gaussian
/// draws tested against the ball of radius `-Φ⁻¹(α)`.
pub fn dqr_monte_carlo_coverage(alpha: f64, r: usize, n: usize, rng: &mut Rng) -> Result<f64> {
    dqr_theoretical_coverage(alpha, r)?;
    if n == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let radius = -std_normal_inv_cdf(alpha)?;
    let hits = (0..n)
        .filter(|_| (0..r).map(|_| rng.normal().powi(2)).sum::<f64>().sqrt() <= radius)
        .count();
    Ok(hits as f64 / n as f64)
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Composite Simpson rule; independent of the erf/gamma routes.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    fn phi_by_quadrature(z: f64) -> f64 {
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if z < 0.0 {
            simpson(pdf, -12.0, z, 20_000)
        } else {
            0.5 + simpson(pdf, 0.0, z, 20_000)
        }
    }

    #[test]
    fn kth_smallest_small_cases() {
        assert_eq!(empirical_quantile(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&[5.0], 1).unwrap(), 5.0);
        assert!(empirical_quantile(&[], 1).is_err());
        assert!(empirical_quantile(&[1.0], 0).is_err());
        assert!(empirical_quantile(&[1.0], 2).is_err());
    }

    #[test]
    fn kth_smallest_matches_full_sort() {
        let mut rng = Rng::new(7);
        let v: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(empirical_quantile(&v, 90).unwrap(), sorted[89]);
    }

    #[test]
    fn inverse_normal_values() {
        assert_eq!(std_normal_inv_cdf(0.5).unwrap(), 0.0);
        assert_abs_diff_eq!(std_normal_inv_cdf(0.9938).unwrap(), 2.50, epsilon = 0.005);
        // bisection on the quadrature CDF
        let (mut lo, mut hi) = (-5.0, 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if phi_by_quadrature(mid) < 0.05 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(oracle, -1.6449, epsilon = 1e-4);
        assert_abs_diff_eq!(std_normal_inv_cdf(0.05).unwrap(), oracle, epsilon = 1e-8);
        assert!(std_normal_inv_cdf(0.0).is_err());
        assert!(std_normal_inv_cdf(1.0).is_err());
        assert!(std_normal_inv_cdf(f64::NAN).is_err());
    }

    #[test]
    fn inverse_normal_roundtrip_accuracy() {
        for &p in &[1e-10, 1e-6, 0.001, 0.02, 0.02425, 0.1, 0.3, 0.5, 0.77, 0.975, 0.999, 1.0 - 1e-7] {
            let z = std_normal_inv_cdf(p).unwrap();
            assert!((std_normal_cdf(z) - p).abs() <= 1e-8, "p={p}");
        }
    }

    #[test]
    fn chi_squared_values() {
        assert_eq!(chi_squared_cdf(0.0, 4).unwrap(), 0.0);
        assert_abs_diff_eq!(chi_squared_cdf(2.0 * 2f64.ln(), 2).unwrap(), 0.5, epsilon = 1e-12);
        // χ²₃ density integrated numerically
        let pdf3 = |t: f64| {
            if t <= 0.0 {
                0.0
            } else {
                t.sqrt() * (-t / 2.0).exp() / (2f64.powf(1.5) * (std::f64::consts::PI.sqrt() / 2.0))
            }
        };
        let oracle = simpson(pdf3, 0.0, 6.2514, 200_000);
        assert_abs_diff_eq!(oracle, 0.90, epsilon = 1e-3);
        assert_abs_diff_eq!(chi_squared_cdf(6.2514, 3).unwrap(), oracle, epsilon = 1e-7);
        assert!(chi_squared_cdf(-1.0, 2).is_err());
        assert!(chi_squared_cdf(1.0, 0).is_err());
    }

    #[test]
    fn dqr_coverage_examples() {
        assert_eq!(dqr_theoretical_coverage(0.5, 3).unwrap(), 0.0);
        assert_abs_diff_eq!(dqr_theoretical_coverage(0.0062, 3).unwrap(), 0.90, epsilon = 0.005);
        assert_abs_diff_eq!(dqr_theoretical_coverage(0.1, 1).unwrap(), 0.80, epsilon = 1e-8);
        assert!(dqr_theoretical_coverage(0.6, 2).is_err());
        assert!(dqr_theoretical_coverage(0.0, 2).is_err());
    }

    #[test]
    fn dqr_coverage_closed_form_r2() {
        for &a in &[0.01, 0.05, 0.1, 0.25] {
            let z = std_normal_inv_cdf(a).unwrap();
            let closed = 1.0 - (-z * z / 2.0).exp();
            assert!((dqr_theoretical_coverage(a, 2).unwrap() - closed).abs() <= 1e-7);
        }
    }

    #[test]
    fn dqr_coverage_monotone() {
        let alphas = [0.01, 0.05, 0.1, 0.2, 0.3, 0.45];
        for r in 1..=6 {
            let c: Vec<f64> = alphas.iter().map(|&a| dqr_theoretical_coverage(a, r).unwrap()).collect();
            assert!(c.windows(2).all(|w| w[0] > w[1]));
        }
        for &a in &alphas {
            let c: Vec<f64> = (1..=6).map(|r| dqr_theoretical_coverage(a, r).unwrap()).collect();
            assert!(c.windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn dqr_coverage_monte_carlo() {
        let mut rng = Rng::new(11);
        for r in 1..=4 {
            for &a in &[0.05, 0.1] {
                let mc = dqr_monte_carlo_coverage(a, r, 200_000, &mut rng).unwrap();
                assert!((mc - dqr_theoretical_coverage(a, r).unwrap()).abs() < 0.005, "r={r} a={a}");
            }
        }
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.permutation(50), b.permutation(50));
        let mut c = Rng::derive(42, 1);
        let mut d = Rng::derive(42, 2);
        assert_ne!(c.uniform(), d.uniform());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(3);
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }
}
