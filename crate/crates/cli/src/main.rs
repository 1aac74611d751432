//! Command-line front end: spectral supports, densities, sample spectra,
//! estimator evaluations, variance tables and Monte Carlo CLT reports,
//! driven by scenario JSON files.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 separation
//! condition failure, 4 numerical non-convergence.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmusic_core::contour::RectContour;
use gmusic_core::empirical::decompose;
use gmusic_core::estimators::{estimate_all, eta_improved, ImprovedMethod};
use gmusic_core::fluctuations::{gamma_assemble, mse_predict, variance_table, VarianceMethod};
use gmusic_core::montecarlo::{normal_pdf, run_trials, EstimatorKind, StatisticKind, TrialSettings};
use gmusic_core::scenario::Scenario;
use gmusic_core::{sample_realization, AsymptoticSpectrum, Error};

#[derive(Parser)]
#[command(
    name = "gmusic",
    about = "Improved (G-MUSIC) noise-subspace estimation: spectral supports, estimators, \
             variance prediction and Monte Carlo CLT verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Gauss-Legendre nodes per contour side.
    #[arg(long, default_value_t = 128)]
    nodes: usize,
    /// Worker thread cap (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Suppress the timestamp so outputs are byte-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Per-stage timings on stderr.
    #[arg(long)]
    log: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Support of the limiting spectral measure, with separation verdicts.
    Support {
        #[command(flatten)]
        common: Common,
    },
    /// Density of the limiting measure on a grid (CSV: x, density).
    Density {
        #[command(flatten)]
        common: Common,
        /// Grid lower end (default: a little below the support).
        #[arg(long)]
        grid_min: Option<f64>,
        /// Grid upper end (default: a little above the support).
        #[arg(long)]
        grid_max: Option<f64>,
        /// Grid point count.
        #[arg(long, default_value_t = 500)]
        points: usize,
    },
    /// Sample eigenvalues and secular roots of one realization (CSV).
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// All estimator values and the exact target for one realization.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EstimateMethod::Both)]
        method: EstimateMethod,
    },
    /// Variance coefficient table and assembled covariance.
    Variance {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = VarianceMethodArg::Numeric)]
        method: VarianceMethodArg,
    },
    /// Monte Carlo CLT verification report.
    Clt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20000)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Improved)]
        estimator: EstimatorArg,
        #[arg(long, value_enum, default_value_t = StatisticArg::Quadratic)]
        statistic: StatisticArg,
        /// Histogram CSV (bin_left, bin_right, count, normal_pdf_at_center).
        #[arg(long)]
        hist: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateMethod {
    Residue,
    Quadrature,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceMethodArg {
    Numeric,
    Spiked,
    TradNumeric,
    TradClosed,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Improved,
    Traditional,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatisticArg {
    Quadratic,
    BilinearReal,
    Bivariate,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    });
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Separation(_) | Error::DegenerateVariance(_) => 3,
        Error::Numerical(_) | Error::Pole(_) | Error::SupportBoundary(_) => 4,
        _ => 2,
    }
}

struct StageLog {
    enabled: bool,
    start: Instant,
}

impl StageLog {
    fn new(enabled: bool) -> Self {
        StageLog {
            enabled,
            start: Instant::now(),
        }
    }

    fn stage(&mut self, name: &str) {
        if self.enabled {
            eprintln!("[{:>9.3?}] {name}", self.start.elapsed());
        }
    }
}

fn write_output(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Wraps a payload with an optional timestamp envelope.
fn envelope(payload: serde_json::Value, deterministic: bool) -> serde_json::Value {
    if deterministic {
        payload
    } else {
        let mut map = serde_json::Map::new();
        map.insert(
            "generated_unix_ms".into(),
            serde_json::json!(std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0)),
        );
        map.insert("result".into(), payload);
        serde_json::Value::Object(map)
    }
}

fn setup(common: &Common) -> Result<(Scenario, AsymptoticSpectrum), Error> {
    if common.threads > 0 {
        // Ignore failure if a global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global();
    }
    let scenario = Scenario::from_path(&common.scenario)?;
    let model = scenario.model()?;
    let spectrum = AsymptoticSpectrum::new(model)?;
    Ok((scenario, spectrum))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Support { common } => {
            let mut log = StageLog::new(common.log);
            let (_, spectrum) = setup(&common)?;
            log.stage("support computed");
            let json = envelope(
                serde_json::to_value(spectrum.support())?,
                common.deterministic,
            );
            write_output(&common.out, &format!("{:#}\n", json))
        }
        Command::Density {
            common,
            grid_min,
            grid_max,
            points,
        } => {
            if points < 2 {
                return Err(Error::InvalidInput("need at least 2 grid points".into()));
            }
            let mut log = StageLog::new(common.log);
            let (_, spectrum) = setup(&common)?;
            let support = spectrum.support();
            let lo = grid_min.unwrap_or_else(|| (support.clusters[0].0 - 0.5).max(0.0));
            let hi = grid_max.unwrap_or_else(|| support.clusters.last().unwrap().1 + 0.5);
            if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::InvalidInput(format!(
                    "empty density grid [{lo}, {hi}]"
                )));
            }
            let mut csv = String::from("x,density\n");
            for i in 0..points {
                let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
                let (d, _) = spectrum.density(x)?;
                csv.push_str(&format!("{x:.12e},{d:.12e}\n"));
            }
            log.stage("density grid evaluated");
            write_output(&common.out, &csv)
        }
        Command::Spectrum { common } => {
            let mut log = StageLog::new(common.log);
            let (scenario, spectrum) = setup(&common)?;
            let seed = common.seed.unwrap_or_else(|| scenario.seed());
            let spec = decompose(
                spectrum.model(),
                &sample_realization(spectrum.model(), seed),
            )?;
            log.stage("realization decomposed");
            let mut csv = String::from("lambda_hat,omega_hat\n");
            for (l, o) in spec.lambda_hat.iter().zip(&spec.omega_hat) {
                csv.push_str(&format!("{l:.12e},{o:.12e}\n"));
            }
            write_output(&common.out, &csv)
        }
        Command::Estimate { common, method } => {
            let mut log = StageLog::new(common.log);
            let (scenario, spectrum) = setup(&common)?;
            let query = scenario.query()?;
            let seed = common.seed.unwrap_or_else(|| scenario.seed());
            let spec = decompose(
                spectrum.model(),
                &sample_realization(spectrum.model(), seed),
            )?;
            log.stage("realization decomposed");
            let mut result = estimate_all(&spectrum, &spec, &query, common.nodes)?;
            if spectrum.model().signal_rank() > 0 {
                // Single-path requests replace the headline value.
                if let Some(m) = match method {
                    EstimateMethod::Residue => Some(ImprovedMethod::Residue),
                    EstimateMethod::Quadrature => Some(ImprovedMethod::Quadrature),
                    EstimateMethod::Both => None,
                } {
                    let contour = RectContour::from_support(spectrum.support(), common.nodes)?;
                    result.eta_improved = eta_improved(&spec, &contour, &query, m)?;
                }
            }
            log.stage("estimators evaluated");
            let json = envelope(serde_json::to_value(&result)?, common.deterministic);
            write_output(&common.out, &format!("{:#}\n", json))
        }
        Command::Variance { common, method } => {
            let mut log = StageLog::new(common.log);
            let (scenario, spectrum) = setup(&common)?;
            let query = scenario.query()?;
            let method = match method {
                VarianceMethodArg::Numeric => VarianceMethod::Numeric,
                VarianceMethodArg::Spiked => VarianceMethod::SpikedClosed,
                VarianceMethodArg::TradNumeric => VarianceMethod::TradNumeric,
                VarianceMethodArg::TradClosed => VarianceMethod::TradClosed,
            };
            let contour = if method.is_numeric() {
                Some(RectContour::from_support(spectrum.support(), common.nodes)?)
            } else {
                None
            };
            let table = variance_table(&spectrum, contour.as_ref(), method, None)?;
            log.stage("variance table computed");
            let assembly = gamma_assemble(spectrum.model(), &query, &table)?;
            let prediction = mse_predict(&assembly, query.xi, spectrum.model().sample_count());
            log.stage("covariance assembled");
            let json = envelope(
                serde_json::json!({
                    "table": table,
                    "gamma": assembly.gamma,
                    "prediction": prediction,
                }),
                common.deterministic,
            );
            write_output(&common.out, &format!("{:#}\n", json))
        }
        Command::Clt {
            common,
            trials,
            estimator,
            statistic,
            hist,
        } => {
            let mut log = StageLog::new(common.log);
            let (scenario, spectrum) = setup(&common)?;
            let query = scenario.query()?;
            let settings = TrialSettings {
                trials,
                master_seed: common.seed.unwrap_or_else(|| scenario.seed()),
                estimator: match estimator {
                    EstimatorArg::Improved => EstimatorKind::Improved,
                    EstimatorArg::Traditional => EstimatorKind::Traditional,
                },
                statistic: match statistic {
                    StatisticArg::Quadratic => StatisticKind::Quadratic,
                    StatisticArg::BilinearReal => StatisticKind::BilinearReal,
                    StatisticArg::Bivariate => StatisticKind::Bivariate,
                },
                nodes_per_side: common.nodes,
                center_override: None,
            };
            let report = run_trials(&spectrum, &query, &settings)?;
            log.stage("trials complete");
            if let Some(hist_path) = hist {
                let mut csv = String::from("bin_left,bin_right,count,normal_pdf_at_center\n");
                let h = &report.histogram;
                for (i, &count) in h.counts.iter().enumerate() {
                    let (left, right) = (h.edges[i], h.edges[i + 1]);
                    csv.push_str(&format!(
                        "{left:.6e},{right:.6e},{count},{:.6e}\n",
                        normal_pdf(0.5 * (left + right))
                    ));
                }
                std::fs::write(hist_path, csv)?;
            }
            let json = envelope(serde_json::to_value(&report)?, common.deterministic);
            write_output(&common.out, &format!("{:#}\n", json))
        }
    }
}
