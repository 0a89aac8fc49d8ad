//! Plot-ready CSV outputs and the JSON run manifest.
//!
//! Every float is written with Rust's shortest round-trip formatting and
//! nothing time- or host-dependent goes into any file, so a rerun with the
//! same seed and configuration is byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::{cumulative_returns, BacktestRun};
use crate::error::{Error, Result};

const LOCK_NAME: &str = "portemu.lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory is locked by {}; remove it if no run is active",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Reproducibility record embedded in every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    /// The resolved configuration, verbatim TOML.
    pub config_toml: String,
    pub assets: Vec<String>,
    pub strategies: Vec<String>,
    pub deltas: Vec<f64>,
    /// Parental sets by asset index.
    pub parents: Vec<Vec<usize>>,
    pub days: usize,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write the full report set; returns the paths written.
///
/// Emits `results.csv` (one row per day, strategy, and cost level),
/// `weights.csv`, one `cum_returns_delta_<d>.csv` per cost level,
/// `sd_trajectory.csv` with the minimum-variance bound, and
/// `nonzero_counts.csv`, plus `manifest.json`.
pub fn emit_report(
    run: &BacktestRun,
    config_toml: &str,
    seed: u64,
    zero_threshold: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let per_strategy: Vec<_> = run
        .strategies
        .iter()
        .map(|&s| run.strategy_records(s))
        .collect();
    let days = per_strategy.first().map_or(0, |r| r.len());

    // results.csv
    {
        let mut header = vec![
            "day".to_string(),
            "date".to_string(),
            "strategy".to_string(),
            "delta".to_string(),
        ];
        header.extend(run.asset_names.iter().map(|n| format!("w_{n}")));
        header.extend(
            ["realized_return", "turnover", "cumulative_return", "sd", "sd_bound", "failed"]
                .map(String::from),
        );
        let mut rows = Vec::new();
        for (records, &strategy) in per_strategy.iter().zip(&run.strategies) {
            for &delta in &run.deltas {
                let cumulative = cumulative_returns(records, delta);
                for (i, rec) in records.iter().enumerate() {
                    let mut row = vec![
                        rec.day.to_string(),
                        rec.date.format("%Y-%m-%d").to_string(),
                        strategy.as_str().to_string(),
                        fmt(delta),
                    ];
                    row.extend(rec.weights.iter().map(|&w| fmt(w)));
                    row.push(fmt(rec.realized_return));
                    row.push(fmt(rec.turnover));
                    row.push(fmt(cumulative.values[i]));
                    row.push(fmt(rec.realized_sd));
                    row.push(fmt(rec.sd_bound));
                    row.push(rec.failed.to_string());
                    rows.push(row);
                }
            }
        }
        let path = out_dir.join("results.csv");
        write_rows(&path, &header, &rows)?;
        written.push(path);
    }

    // weights.csv: day-major weight trajectories per strategy
    {
        let mut header = vec!["day".to_string(), "date".to_string(), "strategy".to_string()];
        header.extend(run.asset_names.iter().map(|n| format!("w_{n}")));
        let mut rows = Vec::new();
        for day in 0..days {
            for records in &per_strategy {
                let rec = records[day];
                let mut row = vec![
                    rec.day.to_string(),
                    rec.date.format("%Y-%m-%d").to_string(),
                    rec.strategy.as_str().to_string(),
                ];
                row.extend(rec.weights.iter().map(|&w| fmt(w)));
                rows.push(row);
            }
        }
        let path = out_dir.join("weights.csv");
        write_rows(&path, &header, &rows)?;
        written.push(path);
    }

    // one cumulative-return file per cost level, strategies as columns
    for &delta in &run.deltas {
        let mut header = vec!["day".to_string(), "date".to_string()];
        header.extend(run.strategies.iter().map(|s| s.as_str().to_string()));
        let series: Vec<_> = per_strategy
            .iter()
            .map(|records| cumulative_returns(records, delta))
            .collect();
        let mut rows = Vec::new();
        for day in 0..days {
            let rec = per_strategy[0][day];
            let mut row = vec![rec.day.to_string(), rec.date.format("%Y-%m-%d").to_string()];
            for s in &series {
                row.push(fmt(s.values[day]));
            }
            rows.push(row);
        }
        let path = out_dir.join(format!("cum_returns_delta_{}.csv", fmt(delta)));
        write_rows(&path, &header, &rows)?;
        written.push(path);
    }

    // sd_trajectory.csv: per-strategy realized sd plus the shared bound
    {
        let mut header = vec!["day".to_string(), "date".to_string()];
        header.extend(run.strategies.iter().map(|s| format!("sd_{}", s.as_str())));
        header.push("bound".to_string());
        let mut rows = Vec::new();
        for day in 0..days {
            let rec = per_strategy[0][day];
            let mut row = vec![rec.day.to_string(), rec.date.format("%Y-%m-%d").to_string()];
            for records in &per_strategy {
                row.push(fmt(records[day].realized_sd));
            }
            row.push(fmt(rec.sd_bound));
            rows.push(row);
        }
        let path = out_dir.join("sd_trajectory.csv");
        write_rows(&path, &header, &rows)?;
        written.push(path);
    }

    // nonzero_counts.csv: active positions per strategy
    {
        let mut header = vec!["day".to_string(), "date".to_string()];
        header.extend(run.strategies.iter().map(|s| s.as_str().to_string()));
        let mut rows = Vec::new();
        for day in 0..days {
            let rec = per_strategy[0][day];
            let mut row = vec![rec.day.to_string(), rec.date.format("%Y-%m-%d").to_string()];
            for records in &per_strategy {
                let count = records[day]
                    .weights
                    .iter()
                    .filter(|w| w.abs() > zero_threshold)
                    .count();
                row.push(count.to_string());
            }
            rows.push(row);
        }
        let path = out_dir.join("nonzero_counts.csv");
        write_rows(&path, &header, &rows)?;
        written.push(path);
    }

    // manifest.json
    {
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_toml: config_toml.to_string(),
            assets: run.asset_names.clone(),
            strategies: run.strategies.iter().map(|s| s.as_str().to_string()).collect(),
            deltas: run.deltas.clone(),
            parents: run.parents.clone(),
            days,
        };
        let path = out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text)?;
        written.push(path);
    }

    Ok(written)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}
