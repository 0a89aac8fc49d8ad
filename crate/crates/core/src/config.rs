//! Run configuration: TOML with sectioned keys, top-level shorthands for
//! the common loss parameters, and strict unknown-key rejection.
//!
//! An empty file is a valid configuration; every key has a documented
//! default. `inf` is a legal value wherever a penalty can be switched off.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::{BacktestConfig, Strategy};
use crate::constraint::LinearConstraint;
use crate::ddnm::DdnmSpec;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::loss::{LossFamily, LossSpec};
use crate::mcmc::McmcConfig;
use crate::prices::MissingPolicy;

/// A per-step parameter: one value for every step, or one value per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    PerStep(Vec<f64>),
}

impl Schedule {
    pub fn expand(&self, horizon: usize, key: &str) -> Result<Vec<f64>> {
        match self {
            Schedule::Constant(v) => Ok(vec![*v; horizon]),
            Schedule::PerStep(vs) => {
                if vs.len() != horizon {
                    return Err(Error::Config(format!(
                        "{key} lists {} values for horizon {horizon}",
                        vs.len()
                    )));
                }
                Ok(vs.clone())
            }
        }
    }

    pub fn as_constant(&self, key: &str) -> Result<f64> {
        match self {
            Schedule::Constant(v) => Ok(*v),
            Schedule::PerStep(_) => Err(Error::Config(format!(
                "{key} must be a single value here; per-step schedules apply to one-shot solves only"
            ))),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            Schedule::Constant(v) => std::slice::from_ref(v),
            Schedule::PerStep(vs) => vs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: Schedule,
    pub beta: Schedule,
    pub lambda: Schedule,
    pub gamma: Schedule,
    /// Soft expected-return target per step.
    pub target: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: Schedule::Constant(1.0),
            beta: Schedule::Constant(1.0),
            lambda: Schedule::Constant(100.0),
            gamma: Schedule::Constant(f64::INFINITY),
            target: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub lag: usize,
    pub state_discount: f64,
    pub volatility_discount: f64,
    pub parent_threshold: f64,
    pub prior_state_scale: f64,
    pub prior_vol_shape: f64,
    /// Monte Carlo paths per forecast.
    pub paths: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            lag: 2,
            state_discount: 0.98,
            volatility_discount: 0.97,
            parent_threshold: 0.2,
            prior_state_scale: 1.0,
            prior_vol_shape: 5.0,
            paths: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestSection {
    pub horizon: usize,
    pub strategies: Vec<String>,
    pub deltas: Vec<f64>,
    pub training_days: usize,
    pub select_parents: bool,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            horizon: 5,
            strategies: vec!["markowitz".to_string()],
            deltas: vec![0.0, 0.001],
            training_days: 500,
            select_parents: true,
        }
    }
}

/// Parsed, merged, and validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// `forward_fill` or `drop_row`.
    pub missing: String,

    // top-level shorthands, folded into [loss]/[backtest]/[forecast]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Schedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    /// Alias for `target`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Alias for `backtest.horizon`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    /// Alias for `forecast.parent_threshold`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// Alias for `backtest.deltas`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Alias for `forecast.paths`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,

    pub loss: LossSection,
    pub forecast: ForecastSection,
    pub backtest: BacktestSection,
    pub em: EmConfig,
    pub mcmc: McmcConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            missing: "forward_fill".to_string(),
            alpha: None,
            beta: None,
            lambda: None,
            gamma: None,
            target: None,
            m: None,
            h: None,
            d: None,
            delta: None,
            paths: None,
            loss: LossSection::default(),
            forecast: ForecastSection::default(),
            backtest: BacktestSection::default(),
            em: EmConfig::default(),
            mcmc: McmcConfig::default(),
        }
    }
}

impl RunConfig {
    /// Move top-level shorthands into their sections. Called by the
    /// parsers; idempotent.
    fn resolve(mut self) -> Result<Self> {
        if self.target.is_some() && self.m.is_some() {
            return Err(Error::Config(
                "both target and its alias m are set".to_string(),
            ));
        }
        let target = self.target.take().or(self.m.take());
        if let Some(t) = target {
            self.loss.target = t;
        }
        if let Some(v) = self.alpha.take() {
            self.loss.alpha = v;
        }
        if let Some(v) = self.beta.take() {
            self.loss.beta = v;
        }
        if let Some(v) = self.lambda.take() {
            self.loss.lambda = v;
        }
        if let Some(v) = self.gamma.take() {
            self.loss.gamma = v;
        }
        if let Some(h) = self.h.take() {
            self.backtest.horizon = h;
        }
        if let Some(d) = self.d.take() {
            self.forecast.parent_threshold = d;
        }
        if let Some(deltas) = self.delta.take() {
            self.backtest.deltas = deltas;
        }
        if let Some(paths) = self.paths.take() {
            self.forecast.paths = paths;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self.missing.as_str() {
            "forward_fill" | "drop_row" => {}
            other => {
                return Err(Error::Config(format!(
                    "missing must be forward_fill or drop_row, not {other:?}"
                )))
            }
        }
        for (key, schedule, zero_ok) in [
            ("alpha", &self.loss.alpha, true),
            ("beta", &self.loss.beta, false),
            ("lambda", &self.loss.lambda, false),
            ("gamma", &self.loss.gamma, false),
        ] {
            for &v in schedule.values() {
                if v.is_nan() || v < 0.0 || (!zero_ok && v == 0.0) {
                    return Err(Error::Config(format!("{key} must be positive, got {v}")));
                }
            }
        }
        if !self.loss.target.is_finite() {
            return Err(Error::Config(format!(
                "target must be finite, got {}",
                self.loss.target
            )));
        }
        if self.backtest.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".to_string()));
        }
        if self.backtest.deltas.is_empty() {
            return Err(Error::Config("deltas must not be empty".to_string()));
        }
        for &d in &self.backtest.deltas {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::Config(format!(
                    "deltas entries must be non-negative, got {d}"
                )));
            }
        }
        for name in &self.backtest.strategies {
            Strategy::parse(name)?;
        }
        if self.backtest.training_days < 2 {
            return Err(Error::Config("training_days must be at least 2".to_string()));
        }
        if self.forecast.lag == 0 {
            return Err(Error::Config("lag must be at least 1".to_string()));
        }
        for (key, v) in [
            ("state_discount", self.forecast.state_discount),
            ("volatility_discount", self.forecast.volatility_discount),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{key} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.forecast.parent_threshold >= 0.0) {
            return Err(Error::Config(format!(
                "parent_threshold must be non-negative, got {}",
                self.forecast.parent_threshold
            )));
        }
        if !(self.forecast.prior_state_scale > 0.0) || !(self.forecast.prior_vol_shape > 0.0) {
            return Err(Error::Config("forecast priors must be positive".to_string()));
        }
        if self.forecast.paths == 0 {
            return Err(Error::Config("paths must be at least 1".to_string()));
        }
        self.em.validate()?;
        self.mcmc.validate()?;
        Ok(())
    }

    pub fn missing_policy(&self) -> MissingPolicy {
        match self.missing.as_str() {
            "drop_row" => MissingPolicy::DropRow,
            _ => MissingPolicy::ForwardFill,
        }
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        self.backtest.strategies.iter().map(|s| Strategy::parse(s)).collect()
    }

    pub fn ddnm_spec(&self, series: usize) -> DdnmSpec {
        let mut spec = DdnmSpec::new(series);
        spec.lag = self.forecast.lag;
        spec.state_discount = self.forecast.state_discount;
        spec.volatility_discount = self.forecast.volatility_discount;
        spec.prior_state_scale = self.forecast.prior_state_scale;
        spec.prior_vol_shape = self.forecast.prior_vol_shape;
        spec.paths = self.forecast.paths;
        spec
    }

    /// Harness configuration. The harness applies one scalar value per
    /// parameter across the horizon, so per-step schedules are rejected
    /// here by key name.
    pub fn backtest_config(&self) -> Result<BacktestConfig> {
        let cfg = BacktestConfig {
            horizon: self.backtest.horizon,
            strategies: self.strategies()?,
            deltas: self.backtest.deltas.clone(),
            training_days: self.backtest.training_days,
            select_parents: self.backtest.select_parents,
            parent_threshold: self.forecast.parent_threshold,
            target: self.loss.target,
            alpha: self.loss.alpha.as_constant("alpha")?,
            beta: self.loss.beta.as_constant("beta")?,
            lambda: self.loss.lambda.as_constant("lambda")?,
            gamma: self.loss.gamma.as_constant("gamma")?,
            seed: self.seed,
            em: self.em.clone(),
            mcmc: self.mcmc.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full loss specification for a one-shot solve, honoring per-step
    /// schedules.
    pub fn loss_spec(
        &self,
        family: LossFamily,
        horizon: usize,
        initial_weights: nalgebra::DVector<f64>,
    ) -> Result<LossSpec> {
        let assets = initial_weights.len();
        let gamma = match family {
            LossFamily::ExtendedLaplace => self.loss.gamma.expand(horizon, "gamma")?,
            _ => vec![f64::INFINITY; horizon],
        };
        LossSpec::new(
            family,
            self.loss.alpha.expand(horizon, "alpha")?,
            self.loss.beta.expand(horizon, "beta")?,
            self.loss.lambda.expand(horizon, "lambda")?,
            gamma,
            vec![self.loss.target; horizon],
            initial_weights,
            Some(LinearConstraint::sum_to_one(assets)?),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    raw.resolve()
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}
