//! Command-line driver: parent selection, backtests, one-shot decisions,
//! and report generation.
//!
//! Errors leave as machine-readable JSON on standard error and a non-zero
//! exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use portemu::backtest::{run_backtest, Strategy};
use portemu::baselines::markowitz_myopic;
use portemu::config::{parse_config, RunConfig};
use portemu::ddnm::{parents_table, select_parents};
use portemu::em::em_solve;
use portemu::error::{Error, Result};
use portemu::loss::{solve_normal_multistep, ForecastMoments, LossFamily};
use portemu::mcmc::{find_marginal_mode, run_chain, ModeSearchConfig};
use portemu::prices::{load_price_csv, PriceTable};
use portemu::report::{emit_report, read_manifest, OutputLock};

#[derive(Parser)]
#[command(
    name = "portemu",
    version,
    about = "Sequential portfolio decisions from simulated forecast moments"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Price CSV: date column plus one positive series per column.
    #[arg(long, global = true)]
    prices: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Pin reductions to a fixed order. Simulation already writes each path
    /// into its own slot and reduces serially, so this is the only mode;
    /// the flag is accepted for compatibility with scripted runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parental table selected on the given price file.
    SelectParents,
    /// Run the day-by-day experiment and write the report set.
    Backtest,
    /// Solve one decision from a JSON moments file and print the weights.
    OptimizeOnce {
        /// JSON file: {"means": [[..]], "precisions": [[[..]]]} per step.
        #[arg(long)]
        moments: PathBuf,
        /// markowitz | normal | laplace_profiled | laplace_marginal |
        /// extended_laplace; defaults to the first configured strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Current holdings as comma-separated weights; defaults to equal.
        #[arg(long)]
        holdings: Option<String>,
    },
    /// Re-emit the report files from a completed run directory.
    Report {
        /// Directory holding records.json and manifest.json.
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn load_prices(cli: &Cli, cfg: &RunConfig) -> Result<PriceTable> {
    let path = cli.prices.as_ref().ok_or_else(|| {
        Error::Config("--prices is required for this command".to_string())
    })?;
    load_price_csv(path, cfg.missing_policy())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Error::Config("set --out or output_dir".to_string()))
}

fn cmd_select_parents(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let prices = load_prices(cli, &cfg)?;
    let spec = cfg.ddnm_spec(prices.width());
    let parents = select_parents(&spec, &prices.log_prices(), cfg.forecast.parent_threshold)?;
    print!("{}", parents_table(prices.names(), &parents));
    Ok(())
}

fn cmd_backtest(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let prices = load_prices(cli, &cfg)?;
    let out = out_dir(&cfg)?;
    let _lock = OutputLock::acquire(&out)?;

    let spec = cfg.ddnm_spec(prices.width());
    let bt = cfg.backtest_config()?;
    let run = run_backtest(&prices, &spec, &bt)?;

    let mut records = serde_json::to_string_pretty(&run)
        .map_err(|e| Error::Config(e.to_string()))?;
    records.push('\n');
    std::fs::write(out.join("records.json"), records)?;
    emit_report(&run, &cfg.to_toml()?, cfg.seed, cfg.em.zero_threshold, &out)?;

    let flagged = run.records.iter().filter(|r| r.failed).count();
    if flagged > 0 {
        return Err(Error::Flagged(format!(
            "{flagged} of {} records carry solve failures; outputs written to {}",
            run.records.len(),
            out.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MomentsFile {
    /// One mean vector per step.
    means: Vec<Vec<f64>>,
    /// One symmetric positive-definite precision matrix per step, row-major.
    precisions: Vec<Vec<Vec<f64>>>,
}

fn read_moments(path: &Path) -> Result<ForecastMoments> {
    let text = std::fs::read_to_string(path)?;
    let file: MomentsFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let means: Vec<DVector<f64>> = file.means.iter().map(|m| DVector::from_vec(m.clone())).collect();
    let precisions = file
        .precisions
        .iter()
        .map(|rows| {
            let k = rows.len();
            if rows.iter().any(|r| r.len() != k) {
                return Err(Error::ShapeError("precision matrix is not square".into()));
            }
            Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
        })
        .collect::<Result<Vec<_>>>()?;
    ForecastMoments::new(means, precisions)
}

#[derive(Debug, Serialize)]
struct Decision {
    strategy: String,
    weights: Vec<f64>,
    turnover: f64,
}

fn parse_holdings(text: &str, assets: usize) -> Result<DVector<f64>> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad holding {v:?}: {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != assets {
        return Err(Error::ShapeError(format!(
            "{} holdings for {assets} assets",
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}

fn cmd_optimize_once(
    cli: &Cli,
    moments_path: &Path,
    strategy: Option<&str>,
    holdings: Option<&str>,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let moments = read_moments(moments_path)?;
    let k = moments.assets();
    let h = moments.horizon();

    let strategy = match strategy {
        Some(name) => Strategy::parse(name)?,
        None => *cfg
            .strategies()?
            .first()
            .ok_or_else(|| Error::Config("no strategies configured".to_string()))?,
    };
    let w0 = match holdings {
        Some(text) => parse_holdings(text, k)?,
        None => DVector::from_element(k, 1.0 / k as f64),
    };

    let weights = match strategy {
        Strategy::Markowitz => {
            markowitz_myopic(moments.mean(0), moments.precision(0), cfg.loss.target)?
        }
        Strategy::Normal => {
            let spec = cfg.loss_spec(LossFamily::Normal, h, w0.clone())?;
            solve_normal_multistep(&moments, &spec)?.means[0].clone()
        }
        Strategy::LaplaceProfiled | Strategy::ExtendedLaplace => {
            let family = if strategy == Strategy::ExtendedLaplace {
                LossFamily::ExtendedLaplace
            } else {
                LossFamily::Laplace
            };
            let spec = cfg.loss_spec(family, h, w0.clone())?;
            em_solve(&moments, &spec, &cfg.em)?.decision().clone()
        }
        Strategy::LaplaceMarginal => {
            let spec = cfg.loss_spec(LossFamily::Laplace, h, w0.clone())?;
            let mut mcfg = cfg.mcmc.clone();
            mcfg.seed = cfg.seed;
            let chain = run_chain(&moments, &spec, &mcfg)?;
            find_marginal_mode(&chain.mixture, &ModeSearchConfig::default())?.point
        }
    };

    let decision = Decision {
        strategy: strategy.as_str().to_string(),
        turnover: (&weights - &w0).abs().sum(),
        weights: weights.iter().copied().collect(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&decision).map_err(|e| Error::Config(e.to_string()))?
    );
    Ok(())
}

fn cmd_report(cli: &Cli, run_dir: &Path) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(&cfg)?;
    let text = std::fs::read_to_string(run_dir.join("records.json"))?;
    let run: portemu::backtest::BacktestRun =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let manifest = read_manifest(&run_dir.join("manifest.json"))?;
    let zero_threshold = cfg.em.zero_threshold;
    let _lock = OutputLock::acquire(&out)?;
    emit_report(&run, &manifest.config_toml, manifest.seed, zero_threshold, &out)?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

#[derive(Serialize)]
struct ErrorEnvelope<'a> {
    error: ErrorBody<'a>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SelectParents => cmd_select_parents(&cli),
        Command::Backtest => cmd_backtest(&cli),
        Command::OptimizeOnce { moments, strategy, holdings } => cmd_optimize_once(
            &cli,
            moments,
            strategy.as_deref(),
            holdings.as_deref(),
        ),
        Command::Report { run } => cmd_report(&cli, run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let envelope = ErrorEnvelope {
                error: ErrorBody { kind: e.kind(), message: e.to_string() },
            };
            eprintln!(
                "{}",
                serde_json::to_string(&envelope)
                    .unwrap_or_else(|_| format!("{{\"error\":{{\"message\":\"{e}\"}}}}"))
            );
            ExitCode::FAILURE
        }
    }
}
