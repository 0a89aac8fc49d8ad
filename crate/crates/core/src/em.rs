//! Profiled optimization of absolute-penalty losses by
//! expectation-maximization over latent scales.
//!
//! Each absolute-value penalty term is the marginal of a conditionally
//! Gaussian term with a latent variance. The E-step closes those variances in
//! closed form; the M-step is an exact mode solve (filter + smoother) in the
//! resulting Gaussian model. The alternation is a
//! majorization-minimization scheme on the actual loss, so the loss trace is
//! non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ffbs::{backward_smooth, forward_filter};
use crate::loss::{
    conditional_emulator, eval_loss, solve_normal_multistep, ForecastMoments, LossFamily,
    LossSpec,
};

/// Latent variances of the conditionally Gaussian representation:
/// `turnover[(j, t)]` drives the step-`t` increment of asset `j`, and
/// `weight`, present for the extended family, drives the shrinkage block.
///
/// Columns belonging to steps whose penalty is disabled (infinite `lambda` or
/// `gamma`) are stored as zeros and never read.
#[derive(Debug, Clone)]
pub struct LatentScales {
    pub turnover: DMatrix<f64>,
    pub weight: Option<DMatrix<f64>>,
}

/// Which latent-scale family to close in the E-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    Turnover,
    Weight,
}

/// EM controls.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Hard iteration cap.
    pub max_iters: usize,
    /// Stop when the max-abs change of the weight path falls below this.
    pub tol: f64,
    /// Lower bound applied to every latent scale to keep the conditional
    /// model nonsingular when an increment or weight hits zero.
    pub scale_floor: f64,
    /// Magnitude below which weights and increments count as zero in
    /// sparsity reports.
    pub zero_threshold: f64,
    /// Use `lambda^2 |delta|` (and `gamma^2 |w|`) in the E-step instead of
    /// `lambda |delta|`. The default scaling is the conditional-expectation
    /// one that makes the iteration a descent scheme on the loss; the
    /// squared variant is retained for cross-checks against formulations
    /// that fold the penalty weight into the latent variance.
    pub squared_scale_estep: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-8,
            scale_floor: 1e-12,
            zero_threshold: 1e-6,
            squared_scale_estep: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        for (name, v) in [
            ("tol", self.tol),
            ("scale_floor", self.scale_floor),
            ("zero_threshold", self.zero_threshold),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Closes one family of latent scales at the current path.
///
/// Turnover: `tau_jt = lambda_t |w_jt - w_{j,t-1}|`; weight:
/// `phi_jt = gamma_t |w_jt|`; both floored at `cfg.scale_floor`. Steps with
/// an infinite penalty weight produce zero columns that the conditional
/// model ignores.
pub fn estep_scales(
    path: &[DVector<f64>],
    spec: &LossSpec,
    which: ScaleKind,
    cfg: &EmConfig,
) -> Result<DMatrix<f64>> {
    let (k, h) = (spec.assets(), spec.horizon());
    if path.len() != h || path.iter().any(|w| w.len() != k) {
        return Err(Error::ShapeError("path does not match spec dimensions".into()));
    }
    let mut scales = DMatrix::zeros(k, h);
    for t in 0..h {
        match which {
            ScaleKind::Turnover => {
                if !spec.lambda[t].is_finite() {
                    continue;
                }
                let rate = if cfg.squared_scale_estep {
                    spec.lambda[t] * spec.lambda[t]
                } else {
                    spec.lambda[t]
                };
                let prev = if t == 0 { &spec.initial_weights } else { &path[t - 1] };
                for j in 0..k {
                    let mag = (path[t][j] - prev[j]).abs();
                    scales[(j, t)] = (rate * mag).max(cfg.scale_floor);
                }
            }
            ScaleKind::Weight => {
                if !spec.gamma[t].is_finite() {
                    continue;
                }
                let rate = if cfg.squared_scale_estep {
                    spec.gamma[t] * spec.gamma[t]
                } else {
                    spec.gamma[t]
                };
                for j in 0..k {
                    scales[(j, t)] = (rate * path[t][j].abs()).max(cfg.scale_floor);
                }
            }
        }
    }
    Ok(scales)
}

/// Result of [`em_solve`].
#[derive(Debug, Clone)]
pub struct EmSolution {
    /// Final weight path `w_{1:h}`.
    pub path: Vec<DVector<f64>>,
    /// `eval_loss` of the initial path followed by each iterate.
    pub loss_trace: Vec<f64>,
    /// Scales that generated the final path.
    pub scales: LatentScales,
    /// Number of M-steps performed.
    pub iterations: usize,
    /// False when the iteration cap was hit before the path settled.
    pub converged: bool,
}

impl EmSolution {
    /// The committed first-step decision.
    pub fn decision(&self) -> &DVector<f64> {
        &self.path[0]
    }
}

fn initial_path(moments: &ForecastMoments, spec: &LossSpec) -> Vec<DVector<f64>> {
    let mut normal = spec.clone();
    normal.family = LossFamily::Normal;
    normal.gamma = vec![f64::INFINITY; spec.horizon()];
    match solve_normal_multistep(moments, &normal) {
        Ok(path) => path.means,
        // Extremely degenerate inputs: start from the held portfolio.
        Err(_) => vec![spec.initial_weights.clone(); spec.horizon()],
    }
}

/// Minimizes a Laplace-family loss by alternating scale closure and exact
/// Gaussian mode solves.
///
/// Initialization is the quadratic-loss solution (falling back to a constant
/// path at the held weights). Stops when the max-abs path change drops below
/// `cfg.tol` or after `cfg.max_iters` iterations, whichever comes first.
pub fn em_solve(
    moments: &ForecastMoments,
    spec: &LossSpec,
    cfg: &EmConfig,
) -> Result<EmSolution> {
    cfg.validate()?;
    if spec.family == LossFamily::Normal {
        return Err(Error::InvalidSpec(
            "EM applies to Laplace-family losses; use the direct normal solve".into(),
        ));
    }
    let extended = spec.family == LossFamily::ExtendedLaplace
        && spec.gamma.iter().any(|g| g.is_finite());

    let mut path = initial_path(moments, spec);
    let mut trace = vec![eval_loss(&path, moments, spec)?];
    let mut scales = LatentScales {
        turnover: DMatrix::zeros(spec.assets(), spec.horizon()),
        weight: None,
    };
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        let tau = estep_scales(&path, spec, ScaleKind::Turnover, cfg)?;
        let phi = if extended {
            Some(estep_scales(&path, spec, ScaleKind::Weight, cfg)?)
        } else {
            None
        };
        let model = conditional_emulator(moments, spec, &tau, phi.as_ref())?;
        let filter = forward_filter(&model)?;
        let new_path = backward_smooth(&filter, &model)?.means;

        let change = new_path
            .iter()
            .zip(&path)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0_f64, f64::max);
        let new_loss = eval_loss(&new_path, moments, spec)?;
        if new_loss > *trace.last().expect("trace starts non-empty") {
            // Surrogate descent is exact in real arithmetic, so an uphill
            // step can only be roundoff dithering around the fixed point.
            // Keep the previous iterate and stop.
            converged = true;
            break;
        }
        path = new_path;
        scales = LatentScales { turnover: tau, weight: phi };
        iterations += 1;
        trace.push(new_loss);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(EmSolution { path, loss_trace: trace, scales, iterations, converged })
}

/// Per-entry sparsity flags of a weight path at a reporting threshold.
#[derive(Debug, Clone)]
pub struct SparsityReport {
    /// `zero_weight[t][j]`: `|w_jt|` is below the threshold.
    pub zero_weight: Vec<Vec<bool>>,
    /// `zero_turnover[t][j]`: `|w_jt - w_{j,t-1}|` is below the threshold.
    pub zero_turnover: Vec<Vec<bool>>,
    pub threshold: f64,
}

impl SparsityReport {
    /// Number of active (non-zero) weights per step.
    pub fn active_weights(&self) -> Vec<usize> {
        self.zero_weight
            .iter()
            .map(|row| row.iter().filter(|&&z| !z).count())
            .collect()
    }

    /// Number of traded (non-zero turnover) assets per step.
    pub fn traded_assets(&self) -> Vec<usize> {
        self.zero_turnover
            .iter()
            .map(|row| row.iter().filter(|&&z| !z).count())
            .collect()
    }
}

/// Flags weights and increments whose magnitude falls below `threshold`.
pub fn report_sparsity(
    path: &[DVector<f64>],
    initial_weights: &DVector<f64>,
    threshold: f64,
) -> SparsityReport {
    let mut zero_weight = Vec::with_capacity(path.len());
    let mut zero_turnover = Vec::with_capacity(path.len());
    for (t, w) in path.iter().enumerate() {
        let prev = if t == 0 { initial_weights } else { &path[t - 1] };
        zero_weight.push(w.iter().map(|x| x.abs() < threshold).collect());
        zero_turnover.push(
            w.iter()
                .zip(prev.iter())
                .map(|(a, b)| (a - b).abs() < threshold)
                .collect(),
        );
    }
    SparsityReport { zero_weight, zero_turnover, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::LinearConstraint;
    use approx::assert_abs_diff_eq;

    fn unit_moments(k: usize, h: usize) -> ForecastMoments {
        ForecastMoments::new(
            (0..h).map(|_| DVector::from_element(k, 0.001)).collect(),
            (0..h).map(|_| DMatrix::identity(k, k)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn estep_matches_closed_form() {
        let spec = LossSpec::constant(
            LossFamily::Laplace, f64::INFINITY, 1.0, 2.0, f64::INFINITY, 0.0, 1,
            DVector::zeros(1), None,
        )
        .unwrap();
        let cfg = EmConfig::default();
        let path = [DVector::from_element(1, 0.5)];
        let tau = estep_scales(&path, &spec, ScaleKind::Turnover, &cfg).unwrap();
        assert_abs_diff_eq!(tau[(0, 0)], 1.0, epsilon = 1e-15);

        let still = [DVector::zeros(1)];
        let tau = estep_scales(&still, &spec, ScaleKind::Turnover, &cfg).unwrap();
        assert_eq!(tau[(0, 0)], cfg.scale_floor);

        let squared = EmConfig { squared_scale_estep: true, ..EmConfig::default() };
        let tau = estep_scales(&path, &spec, ScaleKind::Turnover, &squared).unwrap();
        assert_abs_diff_eq!(tau[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn weight_estep_matches_closed_form() {
        let spec = LossSpec::constant(
            LossFamily::ExtendedLaplace, f64::INFINITY, 1.0, 1.0, 10.0, 0.0, 1,
            DVector::zeros(1), None,
        )
        .unwrap();
        let path = [DVector::from_element(1, 0.3)];
        let phi = estep_scales(&path, &spec, ScaleKind::Weight, &EmConfig::default()).unwrap();
        assert_abs_diff_eq!(phi[(0, 0)], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn scalar_instance_recovers_the_analytic_minimizer() {
        // Loss: w^2 / beta + (2 / lambda) |w - w0| with unit forecast
        // precision and no target block. Minimizer: w* = min(w0, beta/lambda)
        // for w0 > 0.
        let moments = unit_moments(1, 1);
        let cfg = EmConfig::default();
        for (beta, lambda, expected) in [
            (1.0, 4.0, 0.25),   // interior optimum
            (1.0, 0.1, 1.0),    // pinned at the kink w0
        ] {
            let spec = LossSpec::constant(
                LossFamily::Laplace, f64::INFINITY, beta, lambda, f64::INFINITY, 0.0, 1,
                DVector::from_element(1, 1.0), None,
            )
            .unwrap();
            let sol = em_solve(&moments, &spec, &cfg).unwrap();
            assert!(sol.converged);
            assert_abs_diff_eq!(sol.path[0][0], expected, epsilon = 1e-5);
        }
    }

    #[test]
    fn loss_trace_is_weakly_decreasing() {
        let k = 3;
        let h = 2;
        let c = LinearConstraint::sum_to_one(k).unwrap();
        let moments = ForecastMoments::new(
            (0..h)
                .map(|t| DVector::from_fn(k, |i, _| 0.002 + 0.001 * (i + t) as f64))
                .collect(),
            (0..h).map(|_| DMatrix::identity(k, k) * 30.0).collect(),
        )
        .unwrap();
        let spec = LossSpec::constant(
            LossFamily::Laplace, 1.0, 50.0, 20.0, f64::INFINITY, 0.003, h,
            DVector::from_element(k, 1.0 / 3.0), Some(c),
        )
        .unwrap();
        let sol = em_solve(&moments, &spec, &EmConfig::default()).unwrap();
        for pair in sol.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "trace increased: {pair:?}");
        }
        for w in &sol.path {
            assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn extended_family_with_infinite_gamma_reduces_to_laplace() {
        let k = 2;
        let h = 2;
        let moments = unit_moments(k, h);
        let w0 = DVector::from_row_slice(&[0.7, 0.3]);
        let laplace = LossSpec::constant(
            LossFamily::Laplace, 1.0, 10.0, 5.0, f64::INFINITY, 0.001, h,
            w0.clone(), None,
        )
        .unwrap();
        let extended = LossSpec::constant(
            LossFamily::ExtendedLaplace, 1.0, 10.0, 5.0, f64::INFINITY, 0.001, h,
            w0, None,
        )
        .unwrap();
        let cfg = EmConfig { max_iters: 25, ..EmConfig::default() };
        let a = em_solve(&moments, &laplace, &cfg).unwrap();
        let b = em_solve(&moments, &extended, &cfg).unwrap();
        assert_eq!(a.iterations, b.iterations);
        for (x, y) in a.path.iter().zip(&b.path) {
            assert_abs_diff_eq!(x, y, epsilon = 0.0);
        }
    }

    #[test]
    fn sparsity_report_flags_constant_paths() {
        let w = DVector::from_row_slice(&[0.4, 0.6]);
        let path = vec![w.clone(), w.clone()];
        let report = report_sparsity(&path, &w, 1e-6);
        assert!(report.zero_turnover.iter().all(|row| row.iter().all(|&z| z)));
        assert_eq!(report.active_weights(), vec![2, 2]);
        assert_eq!(report.traded_assets(), vec![0, 0]);

        let strict = report_sparsity(&path, &w, 0.0);
        assert!(strict.zero_turnover.iter().all(|row| row.iter().all(|&z| !z)));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let moments = unit_moments(2, 2);
        let spec = LossSpec::constant(
            LossFamily::Laplace, 1.0, 10.0, 5.0, f64::INFINITY, 0.01, 2,
            DVector::from_row_slice(&[0.9, 0.1]), None,
        )
        .unwrap();
        let cfg = EmConfig { max_iters: 1, ..EmConfig::default() };
        let sol = em_solve(&moments, &spec, &cfg).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(!sol.converged);
    }
}
