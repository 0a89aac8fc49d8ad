//! Multi-step decision losses and their synthetic state-space emulators.
//!
//! A loss over weight paths `w_{1:h}` is mapped to a state-space model whose
//! posterior density is `exp(-loss / 2)` up to a constant, so minimizing the
//! loss is finding a posterior mode. Quadratic (normal) losses map exactly;
//! absolute-value penalties map conditionally through latent scales supplied
//! by [`conditional_emulator`].

use nalgebra::{DMatrix, DVector};

use crate::constraint::{LinearConstraint, FEASIBILITY_TOL};
use crate::error::{Error, Result};
use crate::ffbs::{
    backward_smooth, forward_filter, Evolution, ObsBlock, SmoothedPath, StepModel, SyntheticDlm,
};
use crate::linalg::{self, sym_pseudo_inverse, RANK_CUTOFF};

/// Relative tolerance on `|target - mean' w|` under an exact target
/// (`alpha = 0`) before the loss is reported as infinite.
pub const EXACT_TARGET_TOL: f64 = 1e-8;

/// Per-step forecast means and precisions for the asset returns.
///
/// `precision(t)` is the matrix whose inverse is the forecast return
/// covariance; the risk penalty charges `w' precision^{-1} w`.
#[derive(Debug, Clone)]
pub struct ForecastMoments {
    means: Vec<DVector<f64>>,
    precisions: Vec<DMatrix<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl ForecastMoments {
    pub fn new(means: Vec<DVector<f64>>, precisions: Vec<DMatrix<f64>>) -> Result<Self> {
        if means.is_empty() || means.len() != precisions.len() {
            return Err(Error::ShapeError(format!(
                "{} forecast means vs {} precisions",
                means.len(),
                precisions.len()
            )));
        }
        let k = means[0].len();
        if k == 0 {
            return Err(Error::ShapeError("empty forecast mean".into()));
        }
        let mut covariances = Vec::with_capacity(precisions.len());
        for (t, (m, p)) in means.iter().zip(&precisions).enumerate() {
            if m.len() != k || p.nrows() != k || p.ncols() != k {
                return Err(Error::ShapeError(format!(
                    "inconsistent dimensions at forecast step {t}"
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "non-finite forecast mean at step {t}"
                )));
            }
            let chol = linalg::spd_cholesky(p, "forecast precision")?;
            covariances.push(chol.inverse());
        }
        Ok(Self { means, precisions, covariances })
    }

    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    pub fn assets(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, t: usize) -> &DVector<f64> {
        &self.means[t]
    }

    pub fn precision(&self, t: usize) -> &DMatrix<f64> {
        &self.precisions[t]
    }

    /// Inverse of `precision(t)`, i.e. the forecast return covariance.
    pub fn covariance(&self, t: usize) -> &DMatrix<f64> {
        &self.covariances[t]
    }
}

/// Which penalty family the loss uses for turnover (and weights).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFamily {
    /// Quadratic turnover penalty; exact Gaussian emulation.
    Normal,
    /// Absolute turnover penalty `2 lambda^{-1} 1'|delta|`.
    Laplace,
    /// Laplace plus an absolute penalty on the weights themselves,
    /// `2 gamma^{-1} 1'|w|`.
    ExtendedLaplace,
}

impl LossFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossFamily::Normal => "normal",
            LossFamily::Laplace => "laplace",
            LossFamily::ExtendedLaplace => "extended_laplace",
        }
    }
}

/// A complete multi-step loss specification.
///
/// Schedules are per step `t = 1..h`. Infinite entries disable the
/// corresponding penalty: `alpha = inf` drops the target term (`alpha = 0`
/// makes it a hard equality), `beta = inf` drops the risk term,
/// `lambda = inf` removes the link between consecutive steps, and
/// `gamma = inf` drops the weight-shrinkage term.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub family: LossFamily,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub targets: Vec<f64>,
    pub initial_weights: DVector<f64>,
    pub constraint: Option<LinearConstraint>,
    /// Optional per-asset turnover scaling; `None` means the isotropic base.
    pub turnover_scales: Option<DVector<f64>>,
}

fn check_schedule(name: &str, values: &[f64], h: usize, allow_zero: bool) -> Result<()> {
    if values.len() != h {
        return Err(Error::ShapeError(format!(
            "{name} schedule has {} entries for horizon {h}",
            values.len()
        )));
    }
    for &v in values {
        if v.is_nan() || v < 0.0 || (!allow_zero && v == 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} schedule entry {v} out of range"
            )));
        }
    }
    Ok(())
}

impl LossSpec {
    pub fn new(
        family: LossFamily,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        lambda: Vec<f64>,
        gamma: Vec<f64>,
        targets: Vec<f64>,
        initial_weights: DVector<f64>,
        constraint: Option<LinearConstraint>,
    ) -> Result<Self> {
        let h = alpha.len();
        if h == 0 {
            return Err(Error::InvalidSpec("zero-step horizon".into()));
        }
        check_schedule("alpha", &alpha, h, true)?;
        check_schedule("beta", &beta, h, false)?;
        check_schedule("lambda", &lambda, h, false)?;
        check_schedule("gamma", &gamma, h, false)?;
        if targets.len() != h {
            return Err(Error::ShapeError(format!(
                "target schedule has {} entries for horizon {h}",
                targets.len()
            )));
        }
        if targets.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite target".into()));
        }
        if initial_weights.is_empty() || initial_weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("initial weights must be finite".into()));
        }
        if family != LossFamily::ExtendedLaplace && gamma.iter().any(|g| g.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "finite gamma requires the extended family, got {}",
                family.as_str()
            )));
        }
        for t in 0..h {
            if lambda[t].is_infinite() && beta[t].is_infinite() {
                return Err(Error::InvalidSpec(format!(
                    "step {t}: lambda and beta cannot both be infinite"
                )));
            }
        }
        if let Some(c) = &constraint {
            if c.assets() != initial_weights.len() {
                return Err(Error::ShapeError(format!(
                    "constraint covers {} assets, weights have {}",
                    c.assets(),
                    initial_weights.len()
                )));
            }
            if !c.is_feasible(&initial_weights, FEASIBILITY_TOL) {
                return Err(Error::InvalidSpec(
                    "initial weights violate the constraint".into(),
                ));
            }
        }
        Ok(Self {
            family,
            alpha,
            beta,
            lambda,
            gamma,
            targets,
            initial_weights,
            constraint,
            turnover_scales: None,
        })
    }

    /// Constant schedules over `horizon` steps.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        family: LossFamily,
        alpha: f64,
        beta: f64,
        lambda: f64,
        gamma: f64,
        target: f64,
        horizon: usize,
        initial_weights: DVector<f64>,
        constraint: Option<LinearConstraint>,
    ) -> Result<Self> {
        Self::new(
            family,
            vec![alpha; horizon],
            vec![beta; horizon],
            vec![lambda; horizon],
            vec![gamma; horizon],
            vec![target; horizon],
            initial_weights,
            constraint,
        )
    }

    pub fn horizon(&self) -> usize {
        self.alpha.len()
    }

    pub fn assets(&self) -> usize {
        self.initial_weights.len()
    }

    pub fn with_turnover_scales(mut self, scales: DVector<f64>) -> Result<Self> {
        if scales.len() != self.assets() {
            return Err(Error::ShapeError("turnover scale length mismatch".into()));
        }
        if scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(
                "turnover scales must be positive and finite".into(),
            ));
        }
        self.turnover_scales = Some(scales);
        Ok(self)
    }

    fn check_moments(&self, moments: &ForecastMoments) -> Result<()> {
        if moments.horizon() != self.horizon() {
            return Err(Error::ShapeError(format!(
                "forecast horizon {} vs loss horizon {}",
                moments.horizon(),
                self.horizon()
            )));
        }
        if moments.assets() != self.assets() {
            return Err(Error::ShapeError(format!(
                "forecast assets {} vs loss assets {}",
                moments.assets(),
                self.assets()
            )));
        }
        Ok(())
    }

    /// Unscaled turnover base `V` (identity or per-asset diagonal).
    fn turnover_base(&self) -> DMatrix<f64> {
        let k = self.assets();
        match &self.turnover_scales {
            Some(s) => DMatrix::from_diagonal(s),
            None => DMatrix::identity(k, k),
        }
    }

    /// Turnover base after the constraint projection, if any.
    pub fn projected_turnover_base(&self) -> Result<DMatrix<f64>> {
        let base = self.turnover_base();
        match &self.constraint {
            Some(c) => c.project_covariance(&base),
            None => Ok(base),
        }
    }
}

/// Projects an evolution covariance onto a constraint's feasible directions.
pub fn project_evolution_covariance(
    v: &DMatrix<f64>,
    constraint: &LinearConstraint,
) -> Result<DMatrix<f64>> {
    constraint.project_covariance(v)
}

fn step_blocks(moments: &ForecastMoments, spec: &LossSpec, t: usize) -> Vec<ObsBlock> {
    let mut blocks = Vec::new();
    if spec.alpha[t].is_finite() {
        blocks.push(ObsBlock::Scalar {
            design: moments.mean(t).clone(),
            value: spec.targets[t],
            variance: spec.alpha[t],
        });
    }
    if spec.beta[t].is_finite() {
        blocks.push(ObsBlock::Identity {
            value: DVector::zeros(spec.assets()),
            cov: moments.precision(t) * spec.beta[t],
        });
    }
    blocks
}

/// Builds the Gaussian model whose posterior density is `exp(-loss/2)` for a
/// normal-family spec.
pub fn build_normal_emulator(
    moments: &ForecastMoments,
    spec: &LossSpec,
) -> Result<SyntheticDlm> {
    if spec.family != LossFamily::Normal {
        return Err(Error::InvalidSpec(format!(
            "normal emulator requested for {} family",
            spec.family.as_str()
        )));
    }
    spec.check_moments(moments)?;
    let base = spec.projected_turnover_base()?;
    let steps = (0..spec.horizon())
        .map(|t| StepModel {
            evolution: if spec.lambda[t].is_finite() {
                Evolution::Covariance(&base * spec.lambda[t])
            } else {
                Evolution::Diffuse
            },
            blocks: step_blocks(moments, spec, t),
        })
        .collect();
    Ok(SyntheticDlm {
        initial_state: spec.initial_weights.clone(),
        steps,
        constraint: spec.constraint.clone(),
    })
}

/// Builds the conditionally Gaussian model for a Laplace-family spec given
/// latent scales.
///
/// `turnover_scales` is `k x h`; column `t` is the evolution variance of each
/// asset's increment at step `t` (ignored where `lambda_t` is infinite).
/// `weight_scales`, required for the extended family, supplies per-asset
/// variances of an extra zero-valued identity block shrinking the weights
/// themselves (columns with `gamma_t` infinite are ignored).
pub fn conditional_emulator(
    moments: &ForecastMoments,
    spec: &LossSpec,
    turnover_scales: &DMatrix<f64>,
    weight_scales: Option<&DMatrix<f64>>,
) -> Result<SyntheticDlm> {
    if spec.family == LossFamily::Normal {
        return Err(Error::InvalidSpec(
            "conditional emulator applies to Laplace-family losses".into(),
        ));
    }
    spec.check_moments(moments)?;
    let (k, h) = (spec.assets(), spec.horizon());
    if turnover_scales.nrows() != k || turnover_scales.ncols() != h {
        return Err(Error::ShapeError(format!(
            "turnover scales are {}x{}, expected {k}x{h}",
            turnover_scales.nrows(),
            turnover_scales.ncols()
        )));
    }
    let needs_weight_scales =
        spec.family == LossFamily::ExtendedLaplace && spec.gamma.iter().any(|g| g.is_finite());
    if needs_weight_scales && weight_scales.is_none() {
        return Err(Error::InvalidSpec(
            "extended family requires weight scales".into(),
        ));
    }
    if let Some(ws) = weight_scales {
        if ws.nrows() != k || ws.ncols() != h {
            return Err(Error::ShapeError(format!(
                "weight scales are {}x{}, expected {k}x{h}",
                ws.nrows(),
                ws.ncols()
            )));
        }
    }

    let mut steps = Vec::with_capacity(h);
    for t in 0..h {
        let evolution = if spec.lambda[t].is_finite() {
            let v = DMatrix::from_diagonal(&turnover_scales.column(t).clone_owned());
            let w = match &spec.constraint {
                Some(c) => c.project_covariance(&v)?,
                None => v,
            };
            Evolution::Covariance(w)
        } else {
            Evolution::Diffuse
        };
        let mut blocks = step_blocks(moments, spec, t);
        if spec.gamma[t].is_finite() {
            let ws = weight_scales.expect("checked above");
            blocks.push(ObsBlock::Identity {
                value: DVector::zeros(k),
                cov: DMatrix::from_diagonal(&ws.column(t).clone_owned()),
            });
        }
        steps.push(StepModel { evolution, blocks });
    }
    Ok(SyntheticDlm {
        initial_state: spec.initial_weights.clone(),
        steps,
        constraint: spec.constraint.clone(),
    })
}

/// Per-term breakdown of [`eval_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub target: f64,
    pub risk: f64,
    pub turnover: f64,
    pub shrinkage: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.target + self.risk + self.turnover + self.shrinkage
    }
}

/// Evaluates the loss per penalty term.
///
/// Infinite schedule entries contribute zero. An exact target (`alpha = 0`)
/// contributes zero when met within [`EXACT_TARGET_TOL`] (relative) and
/// positive infinity otherwise.
pub fn loss_breakdown(
    path: &[DVector<f64>],
    moments: &ForecastMoments,
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    spec.check_moments(moments)?;
    let h = spec.horizon();
    if path.len() != h {
        return Err(Error::ShapeError(format!(
            "path has {} steps for horizon {h}",
            path.len()
        )));
    }
    let k = spec.assets();
    if path.iter().any(|w| w.len() != k) {
        return Err(Error::ShapeError("path entry dimension mismatch".into()));
    }

    let base_pinv = if spec.family == LossFamily::Normal
        && spec.lambda.iter().any(|l| l.is_finite())
    {
        Some(sym_pseudo_inverse(&spec.projected_turnover_base()?, RANK_CUTOFF)?)
    } else {
        None
    };

    let mut out = LossBreakdown { target: 0.0, risk: 0.0, turnover: 0.0, shrinkage: 0.0 };
    for t in 0..h {
        let w = &path[t];
        let residual = spec.targets[t] - moments.mean(t).dot(w);
        if spec.alpha[t] == 0.0 {
            if residual.abs() > EXACT_TARGET_TOL * spec.targets[t].abs().max(1.0) {
                out.target = f64::INFINITY;
            }
        } else if spec.alpha[t].is_finite() {
            out.target += residual * residual / spec.alpha[t];
        }
        if spec.beta[t].is_finite() {
            out.risk += w.dot(&(moments.covariance(t) * w)) / spec.beta[t];
        }
        if spec.lambda[t].is_finite() {
            let prev = if t == 0 { &spec.initial_weights } else { &path[t - 1] };
            let delta = w - prev;
            match spec.family {
                LossFamily::Normal => {
                    let p = base_pinv.as_ref().expect("computed for finite lambda");
                    out.turnover += delta.dot(&(p * &delta)) / spec.lambda[t];
                }
                LossFamily::Laplace | LossFamily::ExtendedLaplace => {
                    out.turnover += 2.0 * delta.iter().map(|d| d.abs()).sum::<f64>()
                        / spec.lambda[t];
                }
            }
        }
        if spec.gamma[t].is_finite() {
            out.shrinkage += 2.0 * w.iter().map(|x| x.abs()).sum::<f64>() / spec.gamma[t];
        }
    }
    Ok(out)
}

/// Total loss of a weight path under the spec; see [`loss_breakdown`].
pub fn eval_loss(
    path: &[DVector<f64>],
    moments: &ForecastMoments,
    spec: &LossSpec,
) -> Result<f64> {
    Ok(loss_breakdown(path, moments, spec)?.total())
}

/// Exact minimizer of a normal-family loss via filtering and smoothing in the
/// emulating model; the smoothed mean path is the joint posterior mode.
pub fn solve_normal_multistep(
    moments: &ForecastMoments,
    spec: &LossSpec,
) -> Result<SmoothedPath> {
    let model = build_normal_emulator(moments, spec)?;
    let filter = forward_filter(&model)?;
    backward_smooth(&filter, &model)
}
