//! Sequential investment harness: update the forecaster day by day, form
//! h-step return moments, solve the configured strategies, and record
//! realized performance.
//!
//! All strategies on a given day see identical forecast moments (same
//! per-day seed), so differences in the records come from the decision
//! rules alone. Transaction-cost variants are computed post hoc from the
//! stored weight paths.

use chrono::NaiveDate;
use nalgebra::DVector;

use crate::baselines::{markowitz_myopic, min_variance_bound};
use crate::constraint::LinearConstraint;
use crate::ddnm::{select_parents, DdnmFilter, DdnmSpec};
use crate::em::{em_solve, EmConfig};
use crate::error::{Error, Result};
use crate::loss::{solve_normal_multistep, ForecastMoments, LossFamily, LossSpec};
use crate::mcmc::{find_marginal_mode, run_chain, McmcConfig, ModeSearchConfig};
use crate::prices::PriceTable;

/// Decision rules the harness can run side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Myopic mean-variance solve on the first-step moments.
    Markowitz,
    /// Multi-step quadratic-turnover solve.
    Normal,
    /// Laplace turnover penalty, profiled (modal path) decision.
    LaplaceProfiled,
    /// Laplace turnover penalty, marginal-mode decision via the sampler.
    LaplaceMarginal,
    /// Laplace turnover plus weight shrinkage.
    ExtendedLaplace,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Markowitz => "markowitz",
            Strategy::Normal => "normal",
            Strategy::LaplaceProfiled => "laplace_profiled",
            Strategy::LaplaceMarginal => "laplace_marginal",
            Strategy::ExtendedLaplace => "extended_laplace",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "markowitz" => Ok(Strategy::Markowitz),
            "normal" => Ok(Strategy::Normal),
            "laplace_profiled" => Ok(Strategy::LaplaceProfiled),
            "laplace_marginal" => Ok(Strategy::LaplaceMarginal),
            "extended_laplace" => Ok(Strategy::ExtendedLaplace),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    fn family(&self) -> Option<LossFamily> {
        match self {
            Strategy::Markowitz => None,
            Strategy::Normal => Some(LossFamily::Normal),
            Strategy::LaplaceProfiled | Strategy::LaplaceMarginal => Some(LossFamily::Laplace),
            Strategy::ExtendedLaplace => Some(LossFamily::ExtendedLaplace),
        }
    }
}

/// Harness configuration; loss parameters are constant schedules over the
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub horizon: usize,
    pub strategies: Vec<Strategy>,
    /// Proportional transaction costs evaluated post hoc.
    pub deltas: Vec<f64>,
    /// Rows reserved for parental selection and filter warm-up.
    pub training_days: usize,
    /// Run parental selection on the training prefix; otherwise the spec's
    /// parental sets are used as given.
    pub select_parents: bool,
    pub parent_threshold: f64,
    /// Soft return target per step.
    pub target: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
    pub em: EmConfig,
    pub mcmc: McmcConfig,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            strategies: vec![Strategy::Markowitz],
            deltas: vec![0.0, 0.001],
            training_days: 500,
            select_parents: true,
            parent_threshold: 0.2,
            target: 0.0005,
            alpha: 1.0,
            beta: 1.0,
            lambda: 100.0,
            gamma: f64::INFINITY,
            seed: 0,
            em: EmConfig::default(),
            mcmc: McmcConfig::default(),
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidParameter("no strategies configured".into()));
        }
        if self.deltas.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "transaction costs must be non-negative".into(),
            ));
        }
        if !(self.parent_threshold >= 0.0) {
            return Err(Error::InvalidParameter(
                "parent threshold must be non-negative".into(),
            ));
        }
        self.em.validate()?;
        self.mcmc.validate()?;
        Ok(())
    }

    fn loss_spec(
        &self,
        strategy: Strategy,
        initial_weights: DVector<f64>,
        assets: usize,
    ) -> Result<Option<LossSpec>> {
        let family = match strategy.family() {
            Some(f) => f,
            None => return Ok(None),
        };
        let gamma = match family {
            LossFamily::ExtendedLaplace => self.gamma,
            _ => f64::INFINITY,
        };
        let spec = LossSpec::constant(
            family,
            self.alpha,
            self.beta,
            self.lambda,
            gamma,
            self.target,
            self.horizon,
            initial_weights,
            Some(LinearConstraint::sum_to_one(assets)?),
        )?;
        Ok(Some(spec))
    }
}

/// One strategy's decision and realization for one day.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BacktestRecord {
    /// Index of the decision day in the price table.
    pub day: usize,
    pub date: NaiveDate,
    pub strategy: Strategy,
    pub weights: DVector<f64>,
    /// `(1 + r_{t+1})' w - 1` against the next day's realized returns.
    pub realized_return: f64,
    /// `1' |w - w_prev|`.
    pub turnover: f64,
    /// `sqrt(w' Sigma_1 w)` under the day's first-step forecast covariance.
    pub realized_sd: f64,
    /// Minimum-variance standard-deviation bound for the day.
    pub sd_bound: f64,
    /// The solve failed and the previous portfolio was carried unchanged.
    pub failed: bool,
}

/// Full run output, day-major then strategy-major, plus the inputs needed
/// to recompute any derived series.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BacktestRun {
    pub records: Vec<BacktestRecord>,
    pub strategies: Vec<Strategy>,
    pub deltas: Vec<f64>,
    pub asset_names: Vec<String>,
    pub parents: Vec<Vec<usize>>,
}

impl BacktestRun {
    /// Records for one strategy in day order.
    pub fn strategy_records(&self, strategy: Strategy) -> Vec<&BacktestRecord> {
        self.records.iter().filter(|r| r.strategy == strategy).collect()
    }
}

/// Cumulative return series under proportional cost `delta`, with the
/// first period where the gross factor went non-positive, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeSeries {
    pub delta: f64,
    /// `R_t = -1 + prod_{s<=t} {(1 + r_s)' w_s - delta 1'|w_s - w_{s-1}|}`,
    /// one entry per record; `R_0 = 0` is implicit.
    pub values: Vec<f64>,
    pub ruin_at: Option<usize>,
}

/// Exact product recurrence over one strategy's ordered records.
pub fn cumulative_returns(records: &[&BacktestRecord], delta: f64) -> CumulativeSeries {
    let mut product = 1.0;
    let mut values = Vec::with_capacity(records.len());
    let mut ruin_at = None;
    for (i, rec) in records.iter().enumerate() {
        let factor = 1.0 + rec.realized_return - delta * rec.turnover;
        if factor <= 0.0 && ruin_at.is_none() {
            ruin_at = Some(i);
        }
        product *= factor;
        values.push(product - 1.0);
    }
    CumulativeSeries { delta, values, ruin_at }
}

/// Per-day realized standard deviation and the minimum-variance bound.
pub fn realized_sd_series(records: &[&BacktestRecord]) -> Vec<(f64, f64)> {
    records.iter().map(|r| (r.realized_sd, r.sd_bound)).collect()
}

/// Per-day forecast seed: mixes the day index into the global seed so all
/// strategies share one simulation per day while days stay independent.
pub fn day_seed(global: u64, day: usize) -> u64 {
    global ^ (day as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn solve_strategy(
    strategy: Strategy,
    moments: &ForecastMoments,
    w_prev: &DVector<f64>,
    cfg: &BacktestConfig,
    chain_seed: u64,
) -> Result<DVector<f64>> {
    match strategy {
        Strategy::Markowitz => markowitz_myopic(moments.mean(0), moments.precision(0), cfg.target),
        Strategy::Normal => {
            let spec = cfg
                .loss_spec(strategy, w_prev.clone(), w_prev.len())?
                .expect("normal strategy has a loss family");
            let path = solve_normal_multistep(moments, &spec)?;
            Ok(path.means[0].clone())
        }
        Strategy::LaplaceProfiled | Strategy::ExtendedLaplace => {
            let spec = cfg
                .loss_spec(strategy, w_prev.clone(), w_prev.len())?
                .expect("laplace strategies have a loss family");
            let solution = em_solve(moments, &spec, &cfg.em)?;
            Ok(solution.decision().clone())
        }
        Strategy::LaplaceMarginal => {
            let spec = cfg
                .loss_spec(strategy, w_prev.clone(), w_prev.len())?
                .expect("laplace strategies have a loss family");
            let mut mcfg = cfg.mcmc.clone();
            mcfg.seed = chain_seed;
            let chain = run_chain(moments, &spec, &mcfg)?;
            let mode = find_marginal_mode(&chain.mixture, &ModeSearchConfig::default())?;
            Ok(mode.point)
        }
    }
}

/// Run the full protocol: parental selection on the training prefix, filter
/// warm-up, then one decision per remaining day with a next-day price.
pub fn run_backtest(
    prices: &PriceTable,
    spec: &DdnmSpec,
    cfg: &BacktestConfig,
) -> Result<BacktestRun> {
    cfg.validate()?;
    spec.validate()?;
    let k = prices.width();
    if spec.series != k {
        return Err(Error::ShapeError(format!(
            "{k} price series for a {}-series forecaster",
            spec.series
        )));
    }
    let n = prices.len();
    if n < cfg.training_days + 2 {
        return Err(Error::InsufficientData(format!(
            "{n} rows; need training {} plus at least two trading rows",
            cfg.training_days
        )));
    }

    let log = prices.log_prices();
    let training = log.rows(0, cfg.training_days).into_owned();
    let parents = if cfg.select_parents {
        select_parents(spec, &training, cfg.parent_threshold)?
    } else {
        spec.parents.clone()
    };
    let run_spec = spec.clone().with_parents(parents.clone());
    let mut filter = DdnmFilter::fit(run_spec, &training)?;

    let constraint = LinearConstraint::sum_to_one(k)?;
    let mut held: Vec<Option<DVector<f64>>> = vec![None; cfg.strategies.len()];
    let mut records = Vec::new();

    for t in (cfg.training_days - 1)..(n - 1) {
        let current = prices.prices().row(t).transpose();
        let seed = day_seed(cfg.seed, t);
        let moments = filter.forecast_moments(&current, cfg.horizon, spec.paths, seed)?;
        let bound = min_variance_bound(moments.precision(0))?;
        let sigma1 = moments.covariance(0);

        let realized: DVector<f64> = DVector::from_fn(k, |j, _| {
            prices.prices()[(t + 1, j)] / prices.prices()[(t, j)] - 1.0
        });

        let initial = markowitz_myopic(moments.mean(0), moments.precision(0), cfg.target)
            .unwrap_or_else(|_| DVector::from_element(k, 1.0 / k as f64));

        for (s, &strategy) in cfg.strategies.iter().enumerate() {
            let w_prev = constraint.project_point(held[s].as_ref().unwrap_or(&initial));
            let chain_seed = day_seed(seed, s + 1);
            let solved = solve_strategy(strategy, &moments, &w_prev, cfg, chain_seed);
            let (weights, failed) = match solved {
                Ok(w) => (w, false),
                Err(_) => (w_prev.clone(), true),
            };
            let turnover = (&weights - &w_prev).abs().sum();
            let realized_return = (0..k)
                .map(|j| (1.0 + realized[j]) * weights[j])
                .sum::<f64>()
                - 1.0;
            let realized_sd = weights.dot(&(sigma1 * &weights)).max(0.0).sqrt();
            records.push(BacktestRecord {
                day: t,
                date: prices.dates()[t],
                strategy,
                weights: weights.clone(),
                realized_return,
                turnover,
                realized_sd,
                sd_bound: bound.sd_bound,
                failed,
            });
            held[s] = Some(weights);
        }

        let next = log.row(t + 1).transpose();
        filter.observe(&next);
    }

    Ok(BacktestRun {
        records,
        strategies: cfg.strategies.clone(),
        deltas: cfg.deltas.clone(),
        asset_names: prices.names().to_vec(),
        parents,
    })
}
