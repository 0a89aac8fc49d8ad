//! Time-varying VAR forecaster with contemporaneous parental structure.
//!
//! Each log-price series `j` follows its own discounted dynamic regression
//!
//! ```text
//! y_jt = x_t' phi_jt + y_pa(j),t' gamma_jt + N(0, v_jt)
//! ```
//!
//! where `x_t = (1, y_{t-1}', y_{t-2}')` and `pa(j)` is a subset of the
//! series before `j` in the fixed ordering. The triangular structure keeps
//! filtering exact: the joint update over all series is `k` independent
//! univariate conjugate updates. Forecasting beyond one step is by direct
//! simulation from the recursive predictive distributions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, PsdFactor};
use crate::loss::ForecastMoments;

/// Beyond this many rows past the lag warm-up, training is long enough for
/// parental selection.
pub const PARENT_TRAINING_MIN: usize = 50;
/// Ridge factor applied to Monte Carlo return covariances before inversion.
pub const MOMENT_RIDGE: f64 = 1e-8;

/// Model configuration: series count, lag order, parental sets, discount
/// factors, priors, and the Monte Carlo path budget.
#[derive(Debug, Clone, PartialEq)]
pub struct DdnmSpec {
    pub series: usize,
    pub lag: usize,
    /// `parents[j]` lists the contemporaneous predictors of series `j`,
    /// all with index `< j`.
    pub parents: Vec<Vec<usize>>,
    pub state_discount: f64,
    pub volatility_discount: f64,
    /// Prior state covariance is this multiple of the identity.
    pub prior_state_scale: f64,
    /// Observation-precision prior is Gamma(shape, shape * sample variance
    /// of the training log-price differences).
    pub prior_vol_shape: f64,
    pub paths: usize,
}

impl DdnmSpec {
    pub fn new(series: usize) -> Self {
        Self {
            series,
            lag: 2,
            parents: vec![Vec::new(); series],
            state_discount: 0.98,
            volatility_discount: 0.97,
            prior_state_scale: 1.0,
            prior_vol_shape: 5.0,
            paths: 50_000,
        }
    }

    pub fn with_parents(mut self, parents: Vec<Vec<usize>>) -> Self {
        self.parents = parents;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.series == 0 {
            return Err(Error::InvalidSpec("no series".into()));
        }
        if self.lag == 0 {
            return Err(Error::InvalidSpec("lag order must be at least 1".into()));
        }
        if self.parents.len() != self.series {
            return Err(Error::InvalidSpec(format!(
                "{} parental sets for {} series",
                self.parents.len(),
                self.series
            )));
        }
        for (j, pa) in self.parents.iter().enumerate() {
            for &p in pa {
                if p >= j {
                    return Err(Error::InvalidSpec(format!(
                        "series {j} lists parent {p}; parents must precede the series"
                    )));
                }
            }
            if pa.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidSpec(format!(
                    "parents of series {j} must be strictly increasing"
                )));
            }
        }
        for (name, d) in [
            ("state discount", self.state_discount),
            ("volatility discount", self.volatility_discount),
        ] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} {d} outside (0, 1]"
                )));
            }
        }
        if !(self.prior_state_scale > 0.0) || !(self.prior_vol_shape > 0.0) {
            return Err(Error::InvalidParameter(
                "prior scales must be positive".into(),
            ));
        }
        if self.paths == 0 {
            return Err(Error::InvalidParameter("path count must be positive".into()));
        }
        Ok(())
    }

    /// State dimension for series `j`: intercept, `lag` blocks of all `k`
    /// lagged values, then the parental block.
    pub fn state_dim(&self, j: usize) -> usize {
        1 + self.lag * self.series + self.parents[j].len()
    }

    /// Rows needed before filtering can start.
    pub fn warmup(&self) -> usize {
        self.lag
    }
}

/// Conjugate posterior for one series: Student-t state with scale matrix
/// `cov` on the running variance-estimate scale `s = d/n`, and gamma
/// volatility parameters `(n, d)`.
///
/// `d = 0` is permitted as the degenerate known-zero-variance case used by
/// noise-free simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: f64,
    pub d: f64,
}

impl SeriesState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, n: f64, d: f64) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::ShapeError(format!(
                "state covariance {}x{} for mean of length {}",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        linalg::check_symmetric(&cov, "series state covariance")?;
        if !(n > 0.0) || !(d >= 0.0) || !n.is_finite() || !d.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "volatility parameters n={n}, d={d}"
            )));
        }
        Ok(Self { mean, cov, n, d })
    }

    /// Current point estimate of the observation variance.
    pub fn variance_estimate(&self) -> f64 {
        self.d / self.n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Location-scale Student-t one-step predictive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentForecast {
    pub location: f64,
    /// Squared scale; the predictive variance is `scale_sq * dof/(dof-2)`.
    pub scale_sq: f64,
    pub dof: f64,
}

/// One discounted conjugate update.
///
/// The state prior is inflated by `1/state_discount`, the volatility
/// parameters are multiplied by `volatility_discount`, then a standard
/// normal/gamma update absorbs the observation.
pub fn update_series(
    state: &SeriesState,
    regressors: &DVector<f64>,
    observation: f64,
    state_discount: f64,
    volatility_discount: f64,
) -> SeriesState {
    let r = &state.cov / state_discount;
    let n_prior = volatility_discount * state.n;
    let d_prior = volatility_discount * state.d;
    let s_prior = d_prior / n_prior;

    let f = state.mean.dot(regressors);
    let rf = &r * regressors;
    let q = regressors.dot(&rf) + s_prior;
    let e = observation - f;

    let gain = &rf / q;
    let mean = &state.mean + &gain * e;
    let n = n_prior + 1.0;
    let d = d_prior + s_prior * e * e / q;
    let s = d / n;
    let mut cov = (&r - &gain * rf.transpose()) * (s / s_prior);
    linalg::symmetrize(&mut cov);

    SeriesState { mean, cov, n, d }
}

/// Analytic one-step predictive before the update, given the full
/// regressor vector (lags plus contemporaneous parents).
pub fn one_step_forecast(
    state: &SeriesState,
    regressors: &DVector<f64>,
    state_discount: f64,
    volatility_discount: f64,
) -> StudentForecast {
    let r = &state.cov / state_discount;
    let n_prior = volatility_discount * state.n;
    let s_prior = volatility_discount * state.d / n_prior;
    StudentForecast {
        location: state.mean.dot(regressors),
        scale_sq: regressors.dot(&(&r * regressors)) + s_prior,
        dof: n_prior,
    }
}

/// Filter over all series with shared lag history.
#[derive(Debug, Clone)]
pub struct DdnmFilter {
    spec: DdnmSpec,
    states: Vec<SeriesState>,
    /// Most recent `lag` observations, newest last.
    history: Vec<DVector<f64>>,
    time: usize,
}

impl DdnmFilter {
    /// Initialize priors from the first `lag + 1` rows (sample variance of
    /// differences sets the volatility prior rate) and filter through the
    /// remaining training rows.
    pub fn fit(spec: DdnmSpec, training_log_prices: &DMatrix<f64>) -> Result<Self> {
        spec.validate()?;
        let k = spec.series;
        if training_log_prices.ncols() != k {
            return Err(Error::ShapeError(format!(
                "training has {} columns for {} series",
                training_log_prices.ncols(),
                k
            )));
        }
        let rows = training_log_prices.nrows();
        if rows < spec.lag + 2 {
            return Err(Error::InsufficientData(format!(
                "{rows} training rows; need at least {}",
                spec.lag + 2
            )));
        }

        let mut states = Vec::with_capacity(k);
        for j in 0..k {
            let p = spec.state_dim(j);
            let mut var = 0.0;
            let mut mean_diff = 0.0;
            let diffs = rows - 1;
            for t in 0..diffs {
                mean_diff += training_log_prices[(t + 1, j)] - training_log_prices[(t, j)];
            }
            mean_diff /= diffs as f64;
            for t in 0..diffs {
                let d = training_log_prices[(t + 1, j)] - training_log_prices[(t, j)] - mean_diff;
                var += d * d;
            }
            var /= (diffs.max(2) - 1) as f64;
            let n0 = 2.0 * spec.prior_vol_shape;
            // rate floor guards constant training series
            let d0 = (2.0 * spec.prior_vol_shape * var).max(1e-10);
            let mean = DVector::zeros(p);
            let cov = DMatrix::identity(p, p) * spec.prior_state_scale;
            states.push(SeriesState::new(mean, cov, n0, d0)?);
        }

        let history: Vec<DVector<f64>> = (0..spec.lag)
            .map(|t| training_log_prices.row(t).transpose())
            .collect();
        let mut filter = Self {
            spec,
            states,
            history,
            time: 0,
        };
        for t in filter.spec.lag..rows {
            let y = training_log_prices.row(t).transpose();
            filter.observe(&y);
        }
        Ok(filter)
    }

    pub fn spec(&self) -> &DdnmSpec {
        &self.spec
    }

    pub fn states(&self) -> &[SeriesState] {
        &self.states
    }

    /// Observations absorbed past the lag warm-up.
    pub fn time(&self) -> usize {
        self.time
    }

    /// Last observed log-price vector.
    pub fn latest(&self) -> &DVector<f64> {
        self.history.last().expect("lag history is never empty")
    }

    /// Regressor vector for series `j` at the next time point:
    /// intercept, lagged vectors (newest first), then the contemporaneous
    /// parental values taken from `current`.
    pub fn regressors(&self, j: usize, current: &DVector<f64>) -> DVector<f64> {
        history_regressors(&self.spec, &self.history, j, current)
    }

    /// Absorb one day of log prices.
    pub fn observe(&mut self, y: &DVector<f64>) {
        let updated: Vec<SeriesState> = (0..self.spec.series)
            .map(|j| {
                let x = self.regressors(j, y);
                update_series(
                    &self.states[j],
                    &x,
                    y[j],
                    self.spec.state_discount,
                    self.spec.volatility_discount,
                )
            })
            .collect();
        self.states = updated;
        self.history.remove(0);
        self.history.push(y.clone());
        self.time += 1;
    }

    /// Posterior-mean contemporaneous coefficient of parent `p` in series
    /// `j`'s equation.
    pub fn parent_coefficient(&self, j: usize, p: usize) -> Option<f64> {
        let idx = self.spec.parents[j].iter().position(|&q| q == p)?;
        let base = 1 + self.spec.lag * self.spec.series;
        Some(self.states[j].mean[base + idx])
    }

    /// Simulate `n_paths` joint log-price paths `h` steps ahead.
    pub fn simulate_forecast_paths(&self, h: usize, n_paths: usize, seed: u64) -> SimulatedPaths {
        let k = self.spec.series;
        let delta = self.spec.state_discount;
        let kappa = self.spec.volatility_discount;

        struct SeriesDraws {
            mean: DVector<f64>,
            zero: DVector<f64>,
            prior_factor: PsdFactor,
            step_factor: PsdFactor,
            n: f64,
            d: f64,
            s: f64,
        }
        let prep: Vec<SeriesDraws> = self
            .states
            .iter()
            .map(|st| {
                let r = &st.cov / delta;
                let w = &r * (1.0 - delta);
                let prior_factor = PsdFactor::new(&r, linalg::RANK_CUTOFF)
                    .expect("filtered state covariance is positive semidefinite");
                let step_factor = PsdFactor::new(&w, linalg::RANK_CUTOFF)
                    .expect("state evolution covariance is positive semidefinite");
                SeriesDraws {
                    mean: st.mean.clone(),
                    zero: DVector::zeros(st.dim()),
                    prior_factor,
                    step_factor,
                    n: st.n,
                    d: st.d,
                    s: if st.d > 0.0 { st.d / st.n } else { 1.0 },
                }
            })
            .collect();

        let mut values = vec![0.0f64; n_paths * h * k];
        values
            .par_chunks_mut(h * k)
            .enumerate()
            .for_each(|(path, slot)| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream(path as u64);

                let mut history = self.history.clone();
                let mut theta: Vec<DVector<f64>> = Vec::with_capacity(k);
                let mut lambda = vec![0.0f64; k];
                let mut dof = vec![0.0f64; k];
                for (j, sd) in prep.iter().enumerate() {
                    if sd.d > 0.0 {
                        let g = Gamma::new(sd.n / 2.0, 2.0 / sd.d).expect("gamma parameters");
                        lambda[j] = g.sample(&mut rng);
                    } else {
                        lambda[j] = f64::INFINITY;
                    }
                    dof[j] = sd.n;
                    theta.push(sd.mean.clone());
                }

                let mut current = DVector::zeros(k);
                for step in 0..h {
                    for j in 0..k {
                        let sd = &prep[j];
                        // volatility evolution: precision keeps its mean,
                        // degrees of freedom shrink by the discount
                        if sd.d > 0.0 && kappa < 1.0 {
                            let b = Beta::new(kappa * dof[j] / 2.0, (1.0 - kappa) * dof[j] / 2.0)
                                .expect("beta parameters");
                            lambda[j] *= b.sample(&mut rng) / kappa;
                        }
                        dof[j] *= kappa;
                        let v = if lambda[j].is_finite() { 1.0 / lambda[j] } else { 0.0 };
                        let scale = (v / sd.s).sqrt();

                        let factor = if step == 0 { &sd.prior_factor } else { &sd.step_factor };
                        let noise = factor.sample(&sd.zero, &mut rng);
                        if step == 0 {
                            theta[j] = &sd.mean + noise * scale;
                        } else {
                            theta[j] += noise * scale;
                        }

                        let x = history_regressors(&self.spec, &history, j, &current);
                        let z: f64 = StandardNormal.sample(&mut rng);
                        current[j] = x.dot(&theta[j]) + v.sqrt() * z;
                    }
                    for (j, &y) in current.iter().enumerate() {
                        slot[step * k + j] = y;
                    }
                    history.remove(0);
                    history.push(current.clone());
                }
            });

        SimulatedPaths {
            values,
            n_paths,
            horizon: h,
            series: k,
            seed,
            origin_time: self.time,
        }
    }

    /// Forecast moments for the optimizer: simulate, convert to simple
    /// returns, and invert the ridge-stabilized Monte Carlo covariances.
    pub fn forecast_moments(
        &self,
        current_prices: &DVector<f64>,
        h: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<ForecastMoments> {
        let paths = self.simulate_forecast_paths(h, n_paths, seed);
        paths_to_return_moments(&paths, current_prices)
    }
}

fn history_regressors(
    spec: &DdnmSpec,
    history: &[DVector<f64>],
    j: usize,
    current: &DVector<f64>,
) -> DVector<f64> {
    let k = spec.series;
    let mut x = DVector::zeros(spec.state_dim(j));
    x[0] = 1.0;
    for l in 0..spec.lag {
        let past = &history[spec.lag - 1 - l];
        for i in 0..k {
            x[1 + l * k + i] = past[i];
        }
    }
    let base = 1 + spec.lag * k;
    for (idx, &p) in spec.parents[j].iter().enumerate() {
        x[base + idx] = current[p];
    }
    x
}

/// Monte Carlo log-price paths, path-major layout.
#[derive(Debug, Clone)]
pub struct SimulatedPaths {
    values: Vec<f64>,
    n_paths: usize,
    horizon: usize,
    series: usize,
    pub seed: u64,
    pub origin_time: usize,
}

impl SimulatedPaths {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn series(&self) -> usize {
        self.series
    }

    pub fn value(&self, path: usize, step: usize, series: usize) -> f64 {
        self.values[path * self.horizon * self.series + step * self.series + series]
    }

    /// Per-step, per-series Monte Carlo mean of the log prices.
    pub fn mean_log_prices(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.horizon, self.series);
        for p in 0..self.n_paths {
            for t in 0..self.horizon {
                for j in 0..self.series {
                    out[(t, j)] += self.value(p, t, j);
                }
            }
        }
        out / self.n_paths as f64
    }
}

/// Simple-return moments per horizon step from simulated log prices.
///
/// Returns chain through the simulated intermediate prices:
/// `r_{t+i} = p_{t+i}/p_{t+i-1} - 1` with `p = exp(y)` and `p_t` the actual
/// current price. Precisions are inverses of the ridge-stabilized Monte
/// Carlo covariances.
pub fn paths_to_return_moments(
    paths: &SimulatedPaths,
    current_prices: &DVector<f64>,
) -> Result<ForecastMoments> {
    let k = paths.series();
    let h = paths.horizon();
    let n = paths.n_paths();
    if current_prices.len() != k {
        return Err(Error::ShapeError(format!(
            "{} current prices for {} series",
            current_prices.len(),
            k
        )));
    }
    if n < k + 2 {
        return Err(Error::InsufficientData(format!(
            "{n} paths cannot identify a {k}x{k} covariance"
        )));
    }

    let mut sums = vec![DVector::zeros(k); h];
    let mut outer = vec![DMatrix::zeros(k, k); h];
    let mut r = DVector::zeros(k);
    for p in 0..n {
        let mut prev: DVector<f64> = current_prices.clone();
        for t in 0..h {
            for j in 0..k {
                let price = paths.value(p, t, j).exp();
                r[j] = price / prev[j] - 1.0;
                prev[j] = price;
            }
            sums[t] += &r;
            outer[t].ger(1.0, &r, &r, 1.0);
        }
    }

    let mut means = Vec::with_capacity(h);
    let mut precisions = Vec::with_capacity(h);
    for t in 0..h {
        let mean = &sums[t] / n as f64;
        let mut cov = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let c = (outer[t][(i, j)] - n as f64 * mean[i] * mean[j]) / (n - 1) as f64;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let ridge = MOMENT_RIDGE * cov.trace() / k as f64 + 1e-12;
        for i in 0..k {
            cov[(i, i)] += ridge;
        }
        let chol = cov.clone().cholesky().ok_or_else(|| {
            Error::DegenerateForecast(format!("return covariance at step {} not invertible", t + 1))
        })?;
        means.push(mean);
        precisions.push(chol.inverse());
    }
    ForecastMoments::new(means, precisions)
}

/// Fit full models `pa(j) = {0..j-1}` over the training window and keep the
/// parents whose posterior-mean coefficients exceed `threshold` in absolute
/// value.
pub fn select_parents(
    spec: &DdnmSpec,
    training_log_prices: &DMatrix<f64>,
    threshold: f64,
) -> Result<Vec<Vec<usize>>> {
    let rows = training_log_prices.nrows();
    if rows < spec.lag + PARENT_TRAINING_MIN {
        return Err(Error::InsufficientData(format!(
            "{rows} training rows; parental selection needs {}",
            spec.lag + PARENT_TRAINING_MIN
        )));
    }
    let full: Vec<Vec<usize>> = (0..spec.series).map(|j| (0..j).collect()).collect();
    let full_spec = spec.clone().with_parents(full);
    let filter = DdnmFilter::fit(full_spec, training_log_prices)?;

    let mut parents = Vec::with_capacity(spec.series);
    for j in 0..spec.series {
        let mut pa = Vec::new();
        for p in 0..j {
            let coeff = filter
                .parent_coefficient(j, p)
                .expect("full model has every preceding parent");
            if coeff.abs() > threshold {
                pa.push(p);
            }
        }
        parents.push(pa);
    }
    Ok(parents)
}

/// Plain-text parental table: one `name: parent parent ...` line per series.
pub fn parents_table(names: &[String], parents: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for (j, pa) in parents.iter().enumerate() {
        out.push_str(&names[j]);
        out.push(':');
        for &p in pa {
            out.push(' ');
            out.push_str(&names[p]);
        }
        out.push('\n');
    }
    out
}
