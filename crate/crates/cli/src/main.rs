//! `mqr`: generate data, run experiments, and inspect calibrated quantile
//! regions from the command line.

mod svg;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mqr_core::data::{self, Setting};
use mqr_core::experiment::{self, DatasetSpec, ExperimentConfig, Method, RunOutput};
use mqr_core::numerics::{self, Rng};

#[derive(Parser)]
#[command(name = "mqr", version, about = "Calibrated multiple-output quantile regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV plus a JSON manifest.
    GenData(GenDataArgs),
    /// Fit, calibrate and evaluate every (method, seed) cell.
    Run(RunArgs),
    /// Analytic directional-quantile coverage of a Gaussian latent.
    Theory(TheoryArgs),
    /// Draw region scatter plots or area bar charts as SVG.
    Plot(PlotArgs),
    /// Recalibrate saved models.
    Calibrate(CellArgs),
    /// Re-evaluate saved models on their test split.
    Evaluate(CellArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of stdqr,npdqr,naive.
    #[arg(long)]
    methods: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if let Some(list) = &self.methods {
            config.methods = experiment::parse_methods(list)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// linear or nonlinear; overrides the configured dataset.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Reuse cells already computed with the same configuration.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct TheoryArgs {
    /// Comma-separated miscoverage levels.
    #[arg(long, default_value = "0.05,0.1")]
    alphas: String,
    #[arg(long, default_value_t = 1)]
    r_min: usize,
    #[arg(long, default_value_t = 4)]
    r_max: usize,
    /// Add a Monte-Carlo column with this many samples per row.
    #[arg(long)]
    mc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Feature vectors to plot, `;`-separated, values `,`-separated.
    #[arg(long, default_value = "1.5")]
    x: String,
    /// Conditional samples drawn per x.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Run reports (`report.json`) to compare in an area bar chart instead.
    #[arg(long, value_delimiter = ',')]
    reports: Vec<PathBuf>,
}

#[derive(Args)]
struct CellArgs {
    #[command(flatten)]
    common: Common,
    /// Miscoverage level; the configured one when absent.
    #[arg(long)]
    alpha: Option<f64>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Run(args) => run(args),
        Command::Theory(args) => theory(args),
        Command::Plot(args) => plot(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Evaluate(args) => evaluate(args),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a DatasetSpec,
    rows: usize,
    features: &'a [String],
    responses: &'a [String],
    beta: Option<Vec<f64>>,
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = args.common.load()?;
    if let DatasetSpec::Synthetic { setting, d, p, n, data_seed } = &mut config.dataset {
        if let Some(s) = &args.setting {
            *setting = match s.to_ascii_lowercase().as_str() {
                "linear" => Setting::Linear,
                "nonlinear" => Setting::Nonlinear,
                other => bail!("unknown setting '{other}' (expected linear or nonlinear)"),
            };
        }
        *d = args.d.unwrap_or(*d);
        *p = args.p.unwrap_or(*p);
        if args.n.is_some() {
            *n = args.n;
        }
        if let Some(seed) = args.common.seed {
            *data_seed = seed;
        }
    } else {
        bail!("gen-data needs a synthetic dataset specification");
    }
    config.validate()?;
    let ds = config.dataset.load()?;
    std::fs::create_dir_all(&config.out)?;
    let name = config.dataset.name();
    let csv_path = config.out.join(format!("{name}.csv"));
    data::write_csv(&ds, &csv_path)?;
    let beta = match &config.dataset {
        DatasetSpec::Synthetic { p, data_seed, .. } => Some(data::synthetic_beta(*p, *data_seed)),
        DatasetSpec::Csv { .. } => None,
    };
    let manifest = Manifest {
        dataset: &config.dataset,
        rows: ds.len(),
        features: &ds.feature_names,
        responses: &ds.response_names,
        beta,
    };
    std::fs::write(config.out.join(format!("{name}.manifest.json")), serde_json::to_vec_pretty(&manifest)?)?;
    println!("{}", csv_path.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = args.common.load()?;
    config.resume |= args.resume;
    let output = experiment::run(&config, |msg| eprintln!("{msg}"))?;
    print_summary(&output);
    let failed = output.rows.iter().filter(|r| r.status == experiment::Status::Error).count();
    if failed > 0 {
        bail!("{failed} of {} cells failed; see {}", output.rows.len(), config.dataset_dir().join("report.csv").display());
    }
    Ok(())
}

fn print_summary(output: &RunOutput) {
    println!("{} ({} cells, config {})", output.dataset, output.rows.len(), &output.config_hash[..12]);
    println!("{:<8} {:>6} {:>18} {:>18} {:>18}", "method", "seeds", "coverage", "area", "delta coverage");
    for s in &output.summaries {
        println!(
            "{:<8} {:>6} {:>10.4} ({:.4}) {:>10.2} ({:.2}) {:>10.4} ({:.4})",
            s.method,
            s.seeds.len(),
            s.coverage.mean,
            s.coverage.se,
            s.area.mean,
            s.area.se,
            s.delta_coverage.mean,
            s.delta_coverage.se
        );
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, sep: char) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(sep)
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|e| anyhow::anyhow!("cannot parse '{v}': {e}")))
        .collect()
}

fn theory(args: TheoryArgs) -> Result<()> {
    let alphas: Vec<f64> = parse_list(&args.alphas, ',')?;
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header = vec!["alpha", "r", "coverage"];
    if args.mc.is_some() {
        header.push("mc");
    }
    w.write_record(&header)?;
    for &alpha in &alphas {
        for r in args.r_min..=args.r_max {
            let mut record = vec![alpha.to_string(), r.to_string(), numerics::dqr_theoretical_coverage(alpha, r)?.to_string()];
            if let Some(n) = args.mc {
                let mut rng = Rng::derive(args.seed, r as u64);
                record.push(numerics::dqr_monte_carlo_coverage(alpha, r, n, &mut rng)?.to_string());
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn plot(args: PlotArgs) -> Result<()> {
    if !args.reports.is_empty() {
        return plot_areas(&args);
    }
    let config = args.common.load()?;
    let xs: Vec<Vec<f64>> = args.x.split(';').map(|v| parse_list(v, ',')).collect::<Result<_>>()?;
    let dir = config.dataset_dir().join("plots");
    std::fs::create_dir_all(&dir)?;
    for &method in &config.methods {
        for &seed in &config.seeds {
            let (model, _, stats) = experiment::load_cell(&config, method, seed)
                .with_context(|| format!("loading {method} seed {seed}; run it first"))?;
            for (k, x) in xs.iter().enumerate() {
                let samples = experiment::conditional_samples(&config.dataset, x, args.samples, seed)?;
                if samples.ncols() != 2 {
                    bail!("scatter plots need 2 response columns, this dataset has {}", samples.ncols());
                }
                let region = model.region_points(&stats.x.apply_row(x))?;
                let region = stats.y.invert(region.view());
                let title = format!("{method}, seed {seed}, x = {x:?}");
                let doc = svg::region_scatter(&title, samples.view(), region.view(), method == Method::Naive);
                let path = dir.join(format!("{method}_seed{seed}_x{k}.svg"));
                std::fs::write(&path, doc)?;
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn plot_areas(args: &PlotArgs) -> Result<()> {
    let mut groups = Vec::new();
    for path in &args.reports {
        let output: RunOutput = serde_json::from_slice(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)?;
        let bars = output.summaries.iter().map(|s| (s.method.clone(), s.area.mean, s.area.se)).collect();
        groups.push((output.dataset, bars));
    }
    let out = args.common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    let path = out.join("areas.svg");
    std::fs::write(&path, svg::area_bars("Mean region area (grid cells)", &groups))?;
    println!("{}", path.display());
    Ok(())
}

fn calibrate(args: CellArgs) -> Result<()> {
    let config = args.common.load()?;
    let alpha = args.alpha.unwrap_or(config.alpha);
    for &method in &config.methods {
        for &seed in &config.seeds {
            let c = experiment::recalibrate_cell(&config, method, seed, alpha)?;
            let summary = match &c {
                experiment::Calibration::Rule(rule) => serde_json::to_value(rule.report())?,
                experiment::Calibration::Cqr(cqr) => serde_json::to_value(cqr)?,
            };
            println!("{method} seed {seed}: {summary}");
        }
    }
    Ok(())
}

fn evaluate(args: CellArgs) -> Result<()> {
    let config = args.common.load()?;
    for &method in &config.methods {
        for &seed in &config.seeds {
            let m = experiment::evaluate_cell(&config, method, seed)?;
            let path = config.cell_dir(method, seed).join("evaluation.json");
            write_pretty(&path, &m)?;
            println!("{method} seed {seed}: coverage {:.4} area {:.2} delta coverage {:.4}", m.coverage, m.area, m.delta_coverage);
        }
    }
    Ok(())
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}
