//! Directional quantile regression in a learned latent space.
//!
//! A CVAE maps responses to latents, NPDQR is fitted on `(x, z)`, and the
//! latent region at a test point is decoded back to response space point by
//! point. Convex latent regions can decode to non-convex response regions.

use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::calibration::{DiscreteRegion, RegionProvider, Space};
use crate::cvae::{self, CvaeConfig, CvaeModel};
use crate::error::{invalid, Result};
use crate::nn::TrainHistory;
use crate::npdqr::{self, NpdqrConfig, NpdqrModel};
use crate::numerics::Matrix;
use crate::regions::{build_grid, Grid, GridPurpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StdqrConfig {
    pub cvae: CvaeConfig,
    pub npdqr: NpdqrConfig,
    /// Directional coverage before calibration, e.g. 0.93.
    pub directional_level: f64,
}

impl Default for StdqrConfig {
    fn default() -> Self {
        Self {
            cvae: CvaeConfig::default(),
            npdqr: NpdqrConfig::default(),
            directional_level: 0.93,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdqrModel {
    pub cvae: CvaeModel,
    pub npdqr: NpdqrModel,
    pub latent_grid: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdqrHistory {
    pub cvae: TrainHistory,
    pub npdqr: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    latent_dim: usize,
    kl_weight: f64,
    tau: f64,
}

pub fn fit(
    xs: ArrayView2<f64>,
    ys: ArrayView2<f64>,
    val_xs: ArrayView2<f64>,
    val_ys: ArrayView2<f64>,
    config: &StdqrConfig,
) -> Result<(StdqrModel, StdqrHistory)> {
    let level = config.directional_level;
    if !(level > 0.5 && level < 1.0) {
        return Err(invalid(format!("directional level must be in (0.5, 1), got {level}")));
    }
    let (cvae, cvae_history) = cvae::fit(xs, ys, val_xs, val_ys, &config.cvae)?;
    let zs = cvae.encode_mean(xs, ys)?;
    let val_zs = cvae.encode_mean(val_xs, val_ys)?;
    let (npdqr, npdqr_history) = npdqr::fit(xs, zs.view(), val_xs, val_zs.view(), 1.0 - level, &config.npdqr)?;
    let latent_grid = build_grid(zs.view(), GridPurpose::RegionDiscretization)?;
    Ok((
        StdqrModel {
            cvae,
            npdqr,
            latent_grid,
        },
        StdqrHistory {
            cvae: cvae_history,
            npdqr: npdqr_history,
        },
    ))
}

impl StdqrModel {
    pub fn new(cvae: CvaeModel, npdqr: NpdqrModel, latent_grid: Grid) -> Result<Self> {
        if npdqr.response_dim() != cvae.latent_dim || latent_grid.dim() != cvae.latent_dim {
            return Err(invalid("latent dimensions of the CVAE, NPDQR model and grid disagree"));
        }
        if npdqr.feature_dim() != cvae.feature_dim() {
            return Err(invalid("feature dimensions of the CVAE and NPDQR model disagree"));
        }
        Ok(Self {
            cvae,
            npdqr,
            latent_grid,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.cvae.latent_dim
    }

    pub fn response_dim(&self) -> usize {
        self.cvae.response_dim()
    }

    pub fn latent_region(&self, x: &[f64], latent_points: ArrayView2<f64>) -> Result<DiscreteRegion> {
        self.npdqr.extract_from_points(x, latent_points, Space::Latent)
    }

    /// Decoded latent region at `x`.
    pub fn region_from(&self, x: &[f64], latent_points: ArrayView2<f64>) -> Result<DiscreteRegion> {
        let latent = self.latent_region(x, latent_points)?;
        if latent.is_empty() {
            return Ok(DiscreteRegion::empty(self.response_dim(), Space::Response, x.to_vec()));
        }
        let decoded = self.cvae.decode_many(x, latent.points.view())?;
        DiscreteRegion::new(decoded, Space::Response, x.to_vec())
    }

    pub fn region(&self, x: &[f64]) -> Result<DiscreteRegion> {
        self.region_from(x, self.latent_grid.points().view())
    }

    /// Writes `encoder.json`, `decoder.json`, `npdqr.json`, `latent_grid.json`
    /// and `manifest.json` into `dir`.
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.cvae.encoder.save_json(&dir.join("encoder.json"))?;
        self.cvae.decoder.save_json(&dir.join("decoder.json"))?;
        self.npdqr.save_json(&dir.join("npdqr.json"))?;
        std::fs::write(dir.join("latent_grid.json"), serde_json::to_vec(&self.latent_grid)?)?;
        let manifest = Manifest {
            latent_dim: self.cvae.latent_dim,
            kl_weight: self.cvae.kl_weight,
            tau: self.npdqr.tau,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let cvae = CvaeModel {
            encoder: crate::nn::MlpModel::load_json(&dir.join("encoder.json"))?,
            decoder: crate::nn::MlpModel::load_json(&dir.join("decoder.json"))?,
            latent_dim: manifest.latent_dim,
            kl_weight: manifest.kl_weight,
        };
        let npdqr = NpdqrModel::load_json(&dir.join("npdqr.json"))?;
        let grid: Grid = serde_json::from_slice(&std::fs::read(dir.join("latent_grid.json"))?)?;
        Self::new(cvae, npdqr, grid)
    }
}

/// Response-space regions with the latent lattice computed once.
pub struct StdqrRegions<'a> {
    pub model: &'a StdqrModel,
    pub latent_points: Matrix,
}

impl<'a> StdqrRegions<'a> {
    pub fn new(model: &'a StdqrModel) -> Self {
        Self {
            model,
            latent_points: model.latent_grid.points(),
        }
    }
}

impl RegionProvider for StdqrRegions<'_> {
    fn response_dim(&self) -> usize {
        self.model.response_dim()
    }

    fn region(&self, x: &[f64]) -> Result<DiscreteRegion> {
        self.model.region_from(x, self.latent_points.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpModel, MlpSpec, TrainConfig, DEFAULT_LEAKY_SLOPE};
    use crate::numerics::Rng;
    use ndarray::Array2;

    fn quick_train(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 128,
            max_epochs: epochs,
            patience: epochs,
            seed,
        }
    }

    fn quick_config(latent_dim: usize) -> StdqrConfig {
        StdqrConfig {
            cvae: CvaeConfig {
                latent_dim,
                hidden: Some(vec![16, 16]),
                dropout: 0.0,
                train: quick_train(1, 15),
                ..CvaeConfig::default()
            },
            npdqr: NpdqrConfig {
                hidden: vec![16, 16],
                train: quick_train(2, 15),
                ..NpdqrConfig::default()
            },
            directional_level: 0.93,
        }
    }

    fn toy(n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = Rng::new(seed);
        let xs = Array2::from_shape_fn((n, 1), |_| rng.uniform());
        let ys = Array2::from_shape_fn((n, 2), |(i, j)| xs[(i, 0)] * j as f64 + rng.normal());
        (xs, ys)
    }

    /// Decoder computing `z` exactly: `lrelu(z) − lrelu(−z) = (1 + slope) z`.
    fn identity_decoder(p: usize, r: usize) -> MlpModel {
        let spec = MlpSpec {
            input: p + r,
            hidden: vec![2 * r],
            output: r,
            dropout: 0.0,
            batch_norm: false,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        let mut m = MlpModel::zeros(spec);
        let scale = 1.0 / (1.0 + DEFAULT_LEAKY_SLOPE);
        for j in 0..r {
            m.layers[0].weight[(p + j, j)] = 1.0;
            m.layers[0].weight[(p + j, r + j)] = -1.0;
            m.layers[1].weight[(j, j)] = scale;
            m.layers[1].weight[(r + j, j)] = -scale;
        }
        m
    }

    #[test]
    fn identity_decoder_returns_latent_points() {
        let (xs, ys) = toy(400, 3);
        let (mut model, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(2)).unwrap();
        model.cvae.decoder = identity_decoder(1, 2);
        let pts = model.latent_grid.points();
        let latent = model.latent_region(&[0.5], pts.view()).unwrap();
        let decoded = model.region(&[0.5]).unwrap();
        assert_eq!(latent.len(), decoded.len());
        for (a, b) in latent.points.iter().zip(decoded.points.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn region_is_pointwise_decode() {
        let (xs, ys) = toy(400, 4);
        let (model, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(2)).unwrap();
        let x = [0.3];
        let pts = model.latent_grid.points();
        let latent = model.latent_region(&x, pts.view()).unwrap();
        let region = StdqrRegions::new(&model).region(&x).unwrap();
        assert_eq!(region.len(), latent.len());
        assert_eq!(region.space, Space::Response);
        for (k, z) in latent.points.rows().into_iter().enumerate() {
            let y = model.cvae.decode(&x, z.as_slice().unwrap()).unwrap();
            assert_eq!(y.as_slice(), region.points.row(k).as_slice().unwrap());
        }
    }

    #[test]
    fn one_dimensional_latent_region_is_an_interval() {
        let (xs, ys) = toy(400, 5);
        let (model, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(1)).unwrap();
        let pts = model.latent_grid.points();
        let inside: Vec<bool> = {
            let latent = model.latent_region(&[0.5], pts.view()).unwrap();
            let set: Vec<f64> = latent.points.column(0).to_vec();
            pts.column(0).iter().map(|v| set.contains(v)).collect()
        };
        let switches = inside.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(switches <= 2, "latent region is not an interval: {switches} boundaries");
    }

    #[test]
    fn latent_grid_follows_latent_dimension() {
        let mut rng = Rng::new(6);
        let xs = Array2::from_shape_fn((300, 1), |_| rng.uniform());
        let ys = Array2::from_shape_fn((300, 4), |_| rng.normal());
        let (model, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(3)).unwrap();
        assert_eq!(model.latent_grid.cells, vec![35; 3]);
        assert_eq!(model.region(&[0.2]).unwrap().dim(), 4);
    }

    #[test]
    fn deterministic_and_bundle_roundtrip() {
        let (xs, ys) = toy(300, 7);
        let (a, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(2)).unwrap();
        let (b, _) = fit(xs.view(), ys.view(), xs.view(), ys.view(), &quick_config(2)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        a.save_bundle(dir.path()).unwrap();
        let back = StdqrModel::load_bundle(dir.path()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn rejects_bad_level() {
        let (xs, ys) = toy(50, 8);
        let config = StdqrConfig { directional_level: 0.4, ..quick_config(2) };
        assert!(fit(xs.view(), ys.view(), xs.view(), ys.view(), &config).is_err());
    }
}
