//! End-to-end experiment driver: split, normalize, fit, calibrate, evaluate.
//!
//! Results land under `<out>/<dataset>/<method>/<seed>/`. Each cell writes a
//! `report.json` tagged with the hash of the configuration, so an interrupted
//! or repeated run with `resume` set only computes the missing cells.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{self, CalibratedRule, CalibrationConfig, RegionProvider};
use crate::cvae::CvaeConfig;
use crate::data::{self, Dataset, NormalizationStats, Setting, SplitIndices};
use crate::error::{invalid, Error, Result};
use crate::metrics::{self, ClusterAssignment, EvaluationReport, KmeansConfig, SeedMetrics};
use crate::naive_qr::{self, NaiveCalibration, NaiveConfig, NaiveModel};
use crate::npdqr::{self, NpdqrConfig, NpdqrModel, NpdqrRegions};
use crate::numerics::{Matrix, Rng};
use crate::par;
use crate::regions::{build_grid, Grid, GridPurpose};
use crate::stdqr::{self, StdqrConfig, StdqrModel, StdqrRegions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stdqr,
    Npdqr,
    Naive,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Stdqr, Method::Npdqr, Method::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Stdqr => "stdqr",
            Method::Npdqr => "npdqr",
            Method::Naive => "naive",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Stdqr => 1,
            Method::Npdqr => 2,
            Method::Naive => 3,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stdqr" | "st-dqr" => Ok(Method::Stdqr),
            "npdqr" => Ok(Method::Npdqr),
            "naive" | "naive-qr" => Ok(Method::Naive),
            other => Err(invalid(format!("unknown method '{other}' (expected stdqr, npdqr or naive)"))),
        }
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.dedup();
    if out.is_empty() {
        return Err(invalid("method list is empty"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        setting: Setting,
        d: usize,
        p: usize,
        /// Defaults to the configuration's standard size.
        #[serde(default)]
        n: Option<usize>,
        /// Seed of the generated data; splits vary with the run seed.
        #[serde(default)]
        data_seed: u64,
    },
    Csv {
        path: PathBuf,
        responses: Vec<String>,
        /// Reduce features to this many principal components.
        #[serde(default)]
        pca: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { setting, d, p, n, .. } => {
                format!("{setting}_d{d}_p{p}_n{}", n.unwrap_or_else(|| data::default_n(*setting, *p)))
            }
            DatasetSpec::Csv { path, .. } => path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic { setting, d, p, n, data_seed } => {
                data::gen_synthetic(*setting, *d, *p, n.unwrap_or_else(|| data::default_n(*setting, *p)), *data_seed)
            }
            DatasetSpec::Csv { path, responses, pca } => {
                let ds = data::load_csv(path, responses)?;
                match pca {
                    Some(k) if *k < ds.p() => {
                        let (x, _) = data::pca_reduce(ds.x.view(), *k)?;
                        let names = (0..*k).map(|j| format!("pc{j}")).collect();
                        Dataset::with_names(x, ds.y, names, ds.response_names)
                    }
                    _ => Ok(ds),
                }
            }
        }
    }

    fn default_levels(&self) -> (f64, f64) {
        match self {
            DatasetSpec::Synthetic { setting, d, p, .. } => data::default_directional_levels(*setting, *d, *p),
            DatasetSpec::Csv { .. } => (0.95, 0.95),
        }
    }
}

/// Optional caps on the rows used for calibration and evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Subsample {
    pub calibration: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Directional pre-calibration levels; dataset defaults when absent.
    pub npdqr_level: Option<f64>,
    pub stdqr_level: Option<f64>,
    pub npdqr: NpdqrConfig,
    /// Latent dimension and KL weight live here.
    pub cvae: CvaeConfig,
    pub naive: NaiveConfig,
    pub kmeans: KmeansConfig,
    pub subsample: Subsample,
    pub save_models: bool,
    /// Skip cells whose report already carries this configuration's hash.
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic {
                setting: Setting::Nonlinear,
                d: 2,
                p: 1,
                n: None,
                data_seed: 0,
            },
            methods: Method::ALL.to_vec(),
            alpha: 0.1,
            seeds: (0..10).collect(),
            out: PathBuf::from("out"),
            npdqr_level: None,
            stdqr_level: None,
            npdqr: NpdqrConfig::default(),
            cvae: CvaeConfig::default(),
            naive: NaiveConfig::default(),
            kmeans: KmeansConfig::default(),
            subsample: Subsample::default(),
            save_models: true,
            resume: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seed list is empty"));
        }
        if self.methods.is_empty() {
            return Err(invalid("method list is empty"));
        }
        for level in [self.npdqr_level, self.stdqr_level].into_iter().flatten() {
            if !(level > 0.5 && level < 1.0) {
                return Err(invalid(format!("directional level must be in (0.5, 1), got {level}")));
            }
        }
        if let DatasetSpec::Synthetic { n: Some(0), .. } = self.dataset {
            return Err(invalid("synthetic dataset needs n > 0"));
        }
        Ok(())
    }

    /// `(npdqr, stdqr)` directional levels.
    pub fn levels(&self) -> (f64, f64) {
        let (a, b) = self.dataset.default_levels();
        (self.npdqr_level.unwrap_or(a), self.stdqr_level.unwrap_or(b))
    }

    /// SHA-256 of everything that affects a cell's numbers.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        canon.seeds.clear();
        canon.methods.clear();
        canon.save_models = false;
        canon.resume = false;
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join(self.dataset.name())
    }

    pub fn cell_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.dataset_dir().join(method.as_str()).join(seed.to_string())
    }
}

/// Training seed of a (method, seed, component) triple.
pub fn derived_seed(seed: u64, method: Method, component: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (method.tag() << 8) ^ component
}

/// One seed's normalized split.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub split: SplitIndices,
    pub stats: NormalizationStats,
    pub train: Dataset,
    pub calibration: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SeedData {
    pub fn prepare(dataset: &Dataset, seed: u64, subsample: &Subsample) -> Result<Self> {
        let split = data::split(dataset.len(), seed)?;
        let (normalized, stats) = data::zscore_fit_apply(dataset, &split.train)?;
        let cap = |rows: &[usize], limit: Option<usize>| rows[..limit.map_or(rows.len(), |k| k.min(rows.len()))].to_vec();
        let cal_rows = cap(&split.calibration, subsample.calibration);
        let test_rows = cap(&split.test, subsample.test);
        Ok(Self {
            seed,
            train: normalized.select(&split.train),
            calibration: normalized.select(&cal_rows),
            validation: normalized.select(&split.validation),
            test: normalized.select(&test_rows),
            split,
            stats,
        })
    }

    /// Measurement grid for areas, from the training responses.
    pub fn area_grid(&self) -> Result<Grid> {
        build_grid(self.train.y.view(), GridPurpose::AreaMeasurement)
    }
}

/// A trained model of one method.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Stdqr(StdqrModel),
    Npdqr { model: NpdqrModel, grid: Grid },
    Naive(NaiveModel),
}

/// Calibration outcome of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    Rule(CalibratedRule),
    Cqr(NaiveCalibration),
}

impl FittedModel {
    pub fn method(&self) -> Method {
        match self {
            FittedModel::Stdqr(_) => Method::Stdqr,
            FittedModel::Npdqr { .. } => Method::Npdqr,
            FittedModel::Naive(_) => Method::Naive,
        }
    }

    pub fn fit(method: Method, data: &SeedData, config: &ExperimentConfig) -> Result<Self> {
        let (tr, va) = (&data.train, &data.validation);
        let (npdqr_level, stdqr_level) = config.levels();
        let with_seed = |train: &crate::nn::TrainConfig, component| crate::nn::TrainConfig {
            seed: derived_seed(data.seed, method, component),
            ..train.clone()
        };
        Ok(match method {
            Method::Stdqr => {
                let mut sc = StdqrConfig {
                    cvae: config.cvae.clone(),
                    npdqr: config.npdqr.clone(),
                    directional_level: stdqr_level,
                };
                sc.cvae.train = with_seed(&config.cvae.train, 0);
                sc.npdqr.train = with_seed(&config.npdqr.train, 1);
                let (m, _) = stdqr::fit(tr.x.view(), tr.y.view(), va.x.view(), va.y.view(), &sc)?;
                FittedModel::Stdqr(m)
            }
            Method::Npdqr => {
                let mut nc = config.npdqr.clone();
                nc.train = with_seed(&config.npdqr.train, 0);
                let (model, _) =
                    npdqr::fit(tr.x.view(), tr.y.view(), va.x.view(), va.y.view(), 1.0 - npdqr_level, &nc)?;
                let grid = build_grid(tr.y.view(), GridPurpose::RegionDiscretization)?;
                FittedModel::Npdqr { model, grid }
            }
            Method::Naive => {
                let mut nc = config.naive.clone();
                nc.train = with_seed(&config.naive.train, 0);
                let (m, _) = naive_qr::fit(tr.x.view(), tr.y.view(), va.x.view(), va.y.view(), config.alpha, &nc)?;
                FittedModel::Naive(m)
            }
        })
    }

    fn with_provider<T>(&self, f: impl FnOnce(&dyn RegionProvider) -> Result<T>) -> Result<T> {
        match self {
            FittedModel::Stdqr(m) => f(&StdqrRegions::new(m)),
            FittedModel::Npdqr { model, grid } => f(&NpdqrRegions::new(model, grid)),
            FittedModel::Naive(_) => Err(invalid("rectangle regions have no point-cloud provider")),
        }
    }

    /// Calibrates on `(xs, ys)`; the naive model stores its offset in place.
    pub fn calibrate(&mut self, xs: ArrayView2<f64>, ys: ArrayView2<f64>, alpha: f64, area_grid: &Grid) -> Result<Calibration> {
        if let FittedModel::Naive(m) = self {
            return Ok(Calibration::Cqr(m.calibrate(xs, ys, alpha)?));
        }
        let config = CalibrationConfig::new(alpha, area_grid.clone());
        self.with_provider(|p| calibration::calibrate(p, xs, ys, &config))
            .map(Calibration::Rule)
    }

    /// Per-row membership and area in measurement-grid cells.
    pub fn evaluate_rows(
        &self,
        calibration: &Calibration,
        xs: ArrayView2<f64>,
        ys: ArrayView2<f64>,
        area_grid: &Grid,
    ) -> Result<(Vec<bool>, Vec<usize>)> {
        match (self, calibration) {
            (FittedModel::Naive(m), Calibration::Cqr(c)) => {
                let mut m = m.clone();
                m.q = c.q;
                let rects = m.regions(xs)?;
                let hits = rects.iter().zip(ys.rows()).map(|(r, y)| r.contains(&y.to_vec())).collect();
                let areas = rects.iter().map(|r| r.grid_area(area_grid)).collect::<Result<_>>()?;
                Ok((hits, areas))
            }
            (_, Calibration::Rule(rule)) => self.with_provider(|p| {
                let rows = par::map_range(xs.nrows(), |i| -> Result<(bool, usize)> {
                    let x = xs.row(i).to_vec();
                    let region = p.region(&x)?;
                    let prepared = rule.prepare(&region);
                    Ok((prepared.contains(&ys.row(i).to_vec()), prepared.area()))
                });
                let rows: Vec<(bool, usize)> = rows.into_iter().collect::<Result<_>>()?;
                Ok(rows.into_iter().unzip())
            }),
            _ => Err(invalid("calibration kind does not match the model")),
        }
    }

    /// Writes the model bundle into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        match self {
            FittedModel::Stdqr(m) => m.save_bundle(dir),
            FittedModel::Npdqr { model, grid } => {
                model.save_json(&dir.join("npdqr.json"))?;
                std::fs::write(dir.join("region_grid.json"), serde_json::to_vec(grid)?)?;
                Ok(())
            }
            FittedModel::Naive(m) => m.save_bundle(dir),
        }
    }

    pub fn load(method: Method, dir: &Path) -> Result<Self> {
        Ok(match method {
            Method::Stdqr => FittedModel::Stdqr(StdqrModel::load_bundle(dir)?),
            Method::Npdqr => FittedModel::Npdqr {
                model: NpdqrModel::load_json(&dir.join("npdqr.json"))?,
                grid: serde_json::from_slice(&std::fs::read(dir.join("region_grid.json"))?)?,
            },
            Method::Naive => FittedModel::Naive(NaiveModel::load_bundle(dir)?),
        })
    }

    /// Region points at `x` (normalized units); rectangles give their corners.
    pub fn region_points(&self, x: &[f64]) -> Result<Matrix> {
        match self {
            FittedModel::Naive(m) => {
                let r = m.region(x)?;
                let d = r.dim();
                Ok(Matrix::from_shape_fn((1 << d, d), |(k, j)| if k >> j & 1 == 1 { r.upper[j] } else { r.lower[j] }))
            }
            _ => self.with_provider(|p| Ok(p.region(x)?.points)),
        }
    }
}

/// Clusters of the test features, shared by all methods of a seed.
pub fn test_clusters(data: &SeedData, config: &KmeansConfig) -> Result<ClusterAssignment> {
    match metrics::kmeans(data.test.x.view(), config, data.seed) {
        Ok(a) => Ok(a),
        // keep the most balanced attempt rather than dropping the metric
        Err(Error::ConstraintUnsatisfied { best, .. }) => Ok(*best),
        Err(e) => Err(e),
    }
}

pub fn seed_metrics(seed: u64, hits: &[bool], areas: &[usize], clusters: &ClusterAssignment, alpha: f64) -> Result<SeedMetrics> {
    let per_cluster = metrics::cluster_coverages(hits, &clusters.labels, clusters.k())?;
    Ok(SeedMetrics {
        seed,
        coverage: metrics::coverage(hits)?,
        area: areas.iter().sum::<usize>() as f64 / areas.len().max(1) as f64,
        delta_coverage: metrics::delta_coverage_from(&per_cluster, alpha),
        cluster_coverages: per_cluster,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

/// One (method, seed) cell of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub status: Status,
    pub error: Option<String>,
    /// Wall time of fitting, calibration and evaluation.
    #[serde(default)]
    pub seconds: f64,
    pub metrics: Option<SeedMetrics>,
    pub calibration: Option<Calibration>,
}

pub const REPORT_CSV_HEADER: [&str; 10] =
    ["config_hash", "dataset", "method", "seed", "status", "coverage", "area", "delta_coverage", "seconds", "error"];

impl ReportRow {
    pub fn csv_record(&self) -> Vec<String> {
        let num = |f: fn(&SeedMetrics) -> f64| self.metrics.as_ref().map_or(String::new(), |m| format!("{:?}", f(m)));
        vec![
            self.config_hash.clone(),
            self.dataset.clone(),
            self.method.to_string(),
            self.seed.to_string(),
            if self.status == Status::Ok { "ok".into() } else { "error".into() },
            num(|m| m.coverage),
            num(|m| m.area),
            num(|m| m.delta_coverage),
            format!("{:.3}", self.seconds),
            self.error.clone().unwrap_or_default(),
        ]
    }
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub config_hash: String,
    pub dataset: String,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<EvaluationReport>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

/// Fits, calibrates and evaluates one cell, saving its artifacts.
pub fn run_cell(method: Method, data: &SeedData, clusters: &ClusterAssignment, config: &ExperimentConfig) -> Result<(SeedMetrics, Calibration)> {
    let dir = config.cell_dir(method, data.seed);
    let area_grid = data.area_grid()?;
    let mut model = FittedModel::fit(method, data, config)?;
    let cal = &data.calibration;
    let calibration = model.calibrate(cal.x.view(), cal.y.view(), config.alpha, &area_grid)?;
    if config.save_models {
        model.save(&dir.join("model"))?;
        write_json(&dir.join("calibration.json"), &calibration)?;
        write_json(&dir.join("normalization.json"), &data.stats)?;
        write_json(&dir.join("split.json"), &data.split)?;
    }
    let (hits, areas) = model.evaluate_rows(&calibration, data.test.x.view(), data.test.y.view(), &area_grid)?;
    let metrics = seed_metrics(data.seed, &hits, &areas, clusters, config.alpha)?;
    Ok((metrics, calibration))
}

/// Runs every (method, seed) cell and writes per-cell and aggregate reports.
/// A failing cell is recorded and the run continues.
pub fn run(config: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<RunOutput> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let name = config.dataset.name();
    let hash = config.hash();
    let root = config.dataset_dir();
    std::fs::create_dir_all(&root)?;
    write_json(&root.join("config.json"), config)?;

    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let pending: Vec<Method> = config
            .methods
            .iter()
            .copied()
            .filter(|&m| {
                let cached = config.resume
                    && read_json::<ReportRow>(&config.cell_dir(m, seed).join("report.json"))
                        .is_ok_and(|r| r.config_hash == hash && r.status == Status::Ok);
                !cached
            })
            .collect();
        let prepared = if pending.is_empty() {
            None
        } else {
            Some(SeedData::prepare(&dataset, seed, &config.subsample).and_then(|d| {
                let c = test_clusters(&d, &config.kmeans)?;
                Ok((d, c))
            }))
        };
        for &method in &config.methods {
            let path = config.cell_dir(method, seed).join("report.json");
            if !pending.contains(&method) {
                progress(&format!("{name} {method} seed {seed}: cached"));
                rows.push(read_json(&path)?);
                continue;
            }
            let started = Instant::now();
            let outcome = match prepared.as_ref().expect("prepared when pending") {
                Ok((data, clusters)) => run_cell(method, data, clusters, config),
                Err(e) => Err(invalid(format!("data preparation failed: {e}"))),
            };
            let seconds = started.elapsed().as_secs_f64();
            let row = match outcome {
                Ok((m, c)) => {
                    progress(&format!("{name} {method} seed {seed}: coverage {:.4} area {:.1}", m.coverage, m.area));
                    ReportRow {
                        config_hash: hash.clone(),
                        dataset: name.clone(),
                        method,
                        seed,
                        status: Status::Ok,
                        error: None,
                        seconds,
                        metrics: Some(m),
                        calibration: Some(c),
                    }
                }
                Err(e) => {
                    progress(&format!("{name} {method} seed {seed}: error: {e}"));
                    ReportRow {
                        config_hash: hash.clone(),
                        dataset: name.clone(),
                        method,
                        seed,
                        status: Status::Error,
                        error: Some(e.to_string()),
                        seconds,
                        metrics: None,
                        calibration: None,
                    }
                }
            };
            write_json(&path, &row)?;
            rows.push(row);
        }
    }
    let summaries = summarize(&rows, &config.methods);
    let output = RunOutput {
        config_hash: hash,
        dataset: name,
        rows,
        summaries,
    };
    write_reports(&root, &output)?;
    Ok(output)
}

/// Mean ± standard error per method over its successful seeds.
pub fn summarize(rows: &[ReportRow], methods: &[Method]) -> Vec<EvaluationReport> {
    methods
        .iter()
        .filter_map(|&m| {
            let cells: Vec<SeedMetrics> = rows.iter().filter(|r| r.method == m).filter_map(|r| r.metrics.clone()).collect();
            EvaluationReport::aggregate(m.as_str(), &cells).ok()
        })
        .collect()
}

/// Writes `report.json`, `report.csv` and `summary.csv` into `dir`.
pub fn write_reports(dir: &Path, output: &RunOutput) -> Result<()> {
    write_json(&dir.join("report.json"), output)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(REPORT_CSV_HEADER)?;
    for row in &output.rows {
        w.write_record(row.csv_record())?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["method", "seeds", "coverage", "coverage_se", "area", "area_se", "delta_coverage", "delta_coverage_se"])?;
    for s in &output.summaries {
        w.write_record([
            s.method.clone(),
            s.seeds.len().to_string(),
            format!("{:?}", s.coverage.mean),
            format!("{:?}", s.coverage.se),
            format!("{:?}", s.area.mean),
            format!("{:?}", s.area.se),
            format!("{:?}", s.delta_coverage.mean),
            format!("{:?}", s.delta_coverage.se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reloads a saved cell: model bundle, calibration and normalization.
pub fn load_cell(config: &ExperimentConfig, method: Method, seed: u64) -> Result<(FittedModel, Calibration, NormalizationStats)> {
    let dir = config.cell_dir(method, seed);
    let model = FittedModel::load(method, &dir.join("model"))?;
    let calibration = read_json(&dir.join("calibration.json"))?;
    let stats = read_json(&dir.join("normalization.json"))?;
    Ok((model, calibration, stats))
}

/// Recalibrates a saved cell at `alpha` and overwrites its calibration.
pub fn recalibrate_cell(config: &ExperimentConfig, method: Method, seed: u64, alpha: f64) -> Result<Calibration> {
    let dataset = config.dataset.load()?;
    let data = SeedData::prepare(&dataset, seed, &config.subsample)?;
    let dir = config.cell_dir(method, seed);
    let mut model = FittedModel::load(method, &dir.join("model"))?;
    let calibration = model.calibrate(data.calibration.x.view(), data.calibration.y.view(), alpha, &data.area_grid()?)?;
    write_json(&dir.join("calibration.json"), &calibration)?;
    Ok(calibration)
}

/// Evaluates a saved cell on its test split without refitting.
pub fn evaluate_cell(config: &ExperimentConfig, method: Method, seed: u64) -> Result<SeedMetrics> {
    let dataset = config.dataset.load()?;
    let data = SeedData::prepare(&dataset, seed, &config.subsample)?;
    let (model, calibration, _) = load_cell(config, method, seed)?;
    let alpha = match &calibration {
        Calibration::Rule(r) => r.alpha,
        Calibration::Cqr(c) => c.alpha,
    };
    let clusters = test_clusters(&data, &config.kmeans)?;
    let (hits, areas) = model.evaluate_rows(&calibration, data.test.x.view(), data.test.y.view(), &data.area_grid()?)?;
    seed_metrics(seed, &hits, &areas, &clusters, alpha)
}

/// Conditional samples of a synthetic dataset at `x` (original units).
pub fn conditional_samples(spec: &DatasetSpec, x: &[f64], n: usize, seed: u64) -> Result<Matrix> {
    match spec {
        DatasetSpec::Synthetic { setting, d, p, data_seed, .. } => {
            if x.len() != *p {
                return Err(invalid(format!("x has {} values, the dataset has {p} features", x.len())));
            }
            let beta = data::synthetic_beta(*p, *data_seed);
            Ok(data::sample_conditional(*setting, *d, &beta, x, n, &mut Rng::new(seed)))
        }
        DatasetSpec::Csv { .. } => Err(invalid("conditional samples need a synthetic dataset")),
    }
}
