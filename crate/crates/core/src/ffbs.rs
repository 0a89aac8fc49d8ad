//! Forward filtering, backward smoothing, and backward sampling for the
//! synthetic state-space model whose posterior encodes a multi-step decision
//! loss.
//!
//! States are portfolio weight vectors following a random walk. Each time step
//! carries a heterogeneous set of observation blocks that are processed
//! sequentially within the step: scalar target rows, and identity-design
//! vector blocks. Zero observation variance (hard targets) and singular or
//! absent evolution covariances are first-class citizens, which is why the
//! smoother and sampler work with pseudo-inverses throughout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::constraint::LinearConstraint;
use crate::error::{Error, Result};
use crate::linalg::{
    self, sample_singular_normal, spd_cholesky, sym_pseudo_inverse, RANK_CUTOFF,
};

/// Relative threshold below which a zero-variance scalar block carries no new
/// information (the observed direction is already pinned by the filter).
const PINNED_EPS: f64 = 1e-13;

/// One observation block within a time step.
#[derive(Debug, Clone)]
pub enum ObsBlock {
    /// `value ~ N(design' w, variance)`; `variance = 0` imposes the target
    /// exactly.
    Scalar {
        design: DVector<f64>,
        value: f64,
        variance: f64,
    },
    /// `value ~ N(w, cov)` with `cov` symmetric positive definite.
    Identity { value: DVector<f64>, cov: DMatrix<f64> },
}

impl ObsBlock {
    fn state_dim(&self) -> usize {
        match self {
            ObsBlock::Scalar { design, .. } => design.len(),
            ObsBlock::Identity { value, .. } => value.len(),
        }
    }
}

/// State evolution from the previous step.
#[derive(Debug, Clone)]
pub enum Evolution {
    /// `w_t = w_{t-1} + N(0, cov)` with `cov` symmetric positive
    /// semi-definite; singular covariances confine the increment to a
    /// subspace.
    Covariance(DMatrix<f64>),
    /// No link to the previous step: the state is free over the feasible
    /// subspace and must be fully determined by this step's positive-variance
    /// blocks.
    Diffuse,
}

/// Evolution plus observation blocks for one time step.
#[derive(Debug, Clone)]
pub struct StepModel {
    pub evolution: Evolution,
    pub blocks: Vec<ObsBlock>,
}

/// The synthetic model: an exactly known initial state, per-step dynamics and
/// observations, and an optional hard constraint shared by every step.
#[derive(Debug, Clone)]
pub struct SyntheticDlm {
    pub initial_state: DVector<f64>,
    pub steps: Vec<StepModel>,
    pub constraint: Option<LinearConstraint>,
}

impl SyntheticDlm {
    pub fn state_dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Structural checks shared by all three passes.
    pub fn validate(&self) -> Result<()> {
        let k = self.state_dim();
        if k == 0 {
            return Err(Error::ShapeError("model has zero state dimension".into()));
        }
        if self.steps.is_empty() {
            return Err(Error::InvalidSpec("model has no time steps".into()));
        }
        if self.initial_state.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("initial state not finite".into()));
        }
        if let Some(c) = &self.constraint {
            if c.assets() != k {
                return Err(Error::ShapeError(format!(
                    "constraint covers {} assets, state has {k}",
                    c.assets()
                )));
            }
        }
        for (t, step) in self.steps.iter().enumerate() {
            match &step.evolution {
                Evolution::Covariance(w) => {
                    if w.nrows() != k || w.ncols() != k {
                        return Err(Error::ShapeError(format!(
                            "evolution covariance at step {t} is {}x{}",
                            w.nrows(),
                            w.ncols()
                        )));
                    }
                    linalg::check_symmetric(w, "evolution covariance")?;
                }
                Evolution::Diffuse => {
                    let proper = step.blocks.iter().any(|b| match b {
                        ObsBlock::Scalar { variance, .. } => *variance > 0.0,
                        ObsBlock::Identity { .. } => true,
                    });
                    if !proper {
                        return Err(Error::InvalidSpec(format!(
                            "diffuse step {t} has no positive-variance block"
                        )));
                    }
                }
            }
            for block in &step.blocks {
                if block.state_dim() != k {
                    return Err(Error::ShapeError(format!(
                        "observation block at step {t} has dimension {}",
                        block.state_dim()
                    )));
                }
                match block {
                    ObsBlock::Scalar { design, value, variance } => {
                        if !variance.is_finite() || *variance < 0.0 {
                            return Err(Error::InvalidParameter(format!(
                                "scalar block variance {variance} at step {t}"
                            )));
                        }
                        if !value.is_finite() || design.iter().any(|x| !x.is_finite()) {
                            return Err(Error::InvalidParameter(format!(
                                "non-finite scalar block at step {t}"
                            )));
                        }
                    }
                    ObsBlock::Identity { value, cov } => {
                        if value.iter().any(|x| !x.is_finite()) {
                            return Err(Error::InvalidParameter(format!(
                                "non-finite identity block at step {t}"
                            )));
                        }
                        linalg::check_symmetric(cov, "identity block covariance")?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Step-ahead covariance before the step's observations are absorbed.
#[derive(Debug, Clone)]
pub enum PriorCovariance {
    Finite(DMatrix<f64>),
    Diffuse,
}

/// Filtering output for one step: the pre-update (prior) and post-update
/// moments needed by the smoothing and sampling passes.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub prior_mean: DVector<f64>,
    pub prior_cov: PriorCovariance,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FilterMoments {
    pub steps: Vec<FilterStep>,
}

impl FilterMoments {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Whether a path holds posterior-mode moments or a single posterior draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Smoothed,
    Sampled,
}

/// A full state trajectory `t = 1..h`.
///
/// For `Smoothed` paths, `means`/`covariances` are the marginal smoothed
/// moments (the mean path is the joint posterior mode of this Gaussian
/// model). For `Sampled` paths, `means` holds the draw and `covariances` the
/// conditional covariance used at each step.
#[derive(Debug, Clone)]
pub struct SmoothedPath {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub kind: PathKind,
}

impl SmoothedPath {
    pub fn horizon(&self) -> usize {
        self.means.len()
    }

    /// The decision-relevant first step.
    pub fn first(&self) -> (&DVector<f64>, &DMatrix<f64>) {
        (&self.means[0], &self.covariances[0])
    }
}

fn apply_scalar_block(
    mu: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    design: &DVector<f64>,
    value: f64,
    variance: f64,
) {
    let k = mu.len();
    let cf = &*cov * design;
    let q = design.dot(&cf) + variance;
    let scale = (cov.trace() / k as f64).abs() * design.norm_squared() + variance.abs();
    if q <= PINNED_EPS * scale || q <= 0.0 {
        // The observed direction carries no remaining uncertainty; a hard
        // target here is either already satisfied or unattainable, and the
        // pinned state wins either way.
        return;
    }
    let gain = cf / q;
    let innov = value - design.dot(mu);
    mu.axpy(innov, &gain, 1.0);
    // Joseph form: C = (I - g f') C (I - g f')' + v g g'.
    let mut x = DMatrix::identity(k, k);
    x.ger(-1.0, &gain, design, 1.0);
    *cov = &x * &*cov * x.transpose();
    if variance > 0.0 {
        cov.ger(variance, &gain, &gain, 1.0);
    }
    linalg::symmetrize(cov);
}

fn apply_identity_block(
    mu: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    value: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<()> {
    let k = mu.len();
    let s = &*cov + obs_cov;
    let chol = spd_cholesky(&s, "identity block innovation")?;
    // G = C S^{-1}; solve S X = C then transpose, using symmetry of C.
    let gain = chol.solve(&cov.transpose()).transpose();
    let innov = value - &*mu;
    *mu += &gain * innov;
    let x = DMatrix::identity(k, k) - &gain;
    *cov = &x * &*cov * x.transpose() + &gain * obs_cov * gain.transpose();
    linalg::symmetrize(cov);
    Ok(())
}

/// Runs the forward filter over all steps, processing each step's blocks
/// sequentially in Joseph form.
///
/// Within a diffuse step the positive-variance blocks are accumulated in
/// information form on the feasible subspace before zero-variance targets are
/// applied, so the step posterior is proper and order-independent.
pub fn forward_filter(model: &SyntheticDlm) -> Result<FilterMoments> {
    model.validate()?;
    let k = model.state_dim();
    let mut mu = model.initial_state.clone();
    let mut cov = DMatrix::zeros(k, k);
    let mut steps = Vec::with_capacity(model.horizon());

    for (t, step) in model.steps.iter().enumerate() {
        let prior_mean = mu.clone();
        let prior_cov;
        match &step.evolution {
            Evolution::Covariance(w) => {
                cov += w;
                linalg::symmetrize(&mut cov);
                prior_cov = PriorCovariance::Finite(cov.clone());
                let prior_scale = cov.amax();
                for block in &step.blocks {
                    match block {
                        ObsBlock::Scalar { design, value, variance } => {
                            apply_scalar_block(&mut mu, &mut cov, design, *value, *variance);
                        }
                        ObsBlock::Identity { value, cov: v } => {
                            apply_identity_block(&mut mu, &mut cov, value, v)?;
                        }
                    }
                }
                // A near-diffuse evolution followed by informative blocks
                // collapses the scale by many orders of magnitude; clean up
                // the roundoff the collapse leaves behind.
                if cov.amax() < 1e-4 * prior_scale {
                    linalg::clip_update_roundoff(&mut cov, prior_scale, "filter update")?;
                }
            }
            Evolution::Diffuse => {
                prior_cov = PriorCovariance::Diffuse;
                let basis = match &model.constraint {
                    Some(c) => c.null_basis().clone(),
                    None => DMatrix::identity(k, k),
                };
                let m = basis.ncols();
                let mut info = DMatrix::zeros(m, m);
                let mut shift = DVector::zeros(m);
                let mut hard: Vec<(&DVector<f64>, f64)> = Vec::new();
                for block in &step.blocks {
                    match block {
                        ObsBlock::Scalar { design, value, variance } if *variance == 0.0 => {
                            hard.push((design, *value));
                        }
                        ObsBlock::Scalar { design, value, variance } => {
                            let fu = basis.tr_mul(design);
                            info.ger(1.0 / variance, &fu, &fu, 1.0);
                            shift.axpy((value - design.dot(&prior_mean)) / variance, &fu, 1.0);
                        }
                        ObsBlock::Identity { value, cov: v } => {
                            let chol = spd_cholesky(v, "identity block covariance")?;
                            let vinv_u = chol.solve(&basis);
                            info += basis.tr_mul(&vinv_u);
                            shift += vinv_u.tr_mul(&(value - &prior_mean));
                        }
                    }
                }
                linalg::symmetrize(&mut info);
                let chol = nalgebra::Cholesky::new(info).ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "diffuse step {t} is not identified by its observation blocks"
                    ))
                })?;
                let reduced_cov = chol.inverse();
                let reduced_mean = &reduced_cov * shift;
                mu = &prior_mean + &basis * reduced_mean;
                cov = &basis * reduced_cov * basis.transpose();
                linalg::symmetrize(&mut cov);
                for (design, value) in hard {
                    apply_scalar_block(&mut mu, &mut cov, design, value, 0.0);
                }
            }
        }
        steps.push(FilterStep {
            prior_mean,
            prior_cov,
            mean: mu.clone(),
            cov: cov.clone(),
        });
    }
    Ok(FilterMoments { steps })
}

fn check_filter_matches(filter: &FilterMoments, model: &SyntheticDlm) -> Result<()> {
    if filter.horizon() != model.horizon() {
        return Err(Error::ShapeError(format!(
            "filter has {} steps, model has {}",
            filter.horizon(),
            model.horizon()
        )));
    }
    if filter
        .steps
        .iter()
        .any(|s| s.mean.len() != model.state_dim())
    {
        return Err(Error::ShapeError(
            "filter state dimension does not match model".into(),
        ));
    }
    Ok(())
}

/// Backward recursion for smoothed marginal moments.
///
/// The retrospective gain uses a pseudo-inverse of the step-ahead covariance,
/// so singular evolutions are handled without regularization; a diffuse step
/// decouples the recursion (gain zero).
pub fn backward_smooth(filter: &FilterMoments, model: &SyntheticDlm) -> Result<SmoothedPath> {
    check_filter_matches(filter, model)?;
    let h = filter.horizon();
    if h == 0 {
        return Err(Error::InvalidSpec("empty filter output".into()));
    }
    let mut means = vec![DVector::zeros(0); h];
    let mut covs = vec![DMatrix::zeros(0, 0); h];
    means[h - 1] = filter.steps[h - 1].mean.clone();
    covs[h - 1] = filter.steps[h - 1].cov.clone();
    for t in (0..h - 1).rev() {
        let here = &filter.steps[t];
        let next = &filter.steps[t + 1];
        match &next.prior_cov {
            PriorCovariance::Diffuse => {
                means[t] = here.mean.clone();
                covs[t] = here.cov.clone();
            }
            PriorCovariance::Finite(r) => {
                let gain = &here.cov * sym_pseudo_inverse(r, RANK_CUTOFF)?;
                means[t] = &here.mean + &gain * (&means[t + 1] - &next.prior_mean);
                let mut s = &here.cov + &gain * (&covs[t + 1] - r) * gain.transpose();
                linalg::symmetrize(&mut s);
                covs[t] = s;
            }
        }
    }
    Ok(SmoothedPath { means, covariances: covs, kind: PathKind::Smoothed })
}

/// Draws one joint posterior trajectory by backward sampling.
///
/// Draws are confined to the numerical range of each conditional covariance,
/// so hard constraints baked into the filter are preserved exactly.
pub fn backward_sample<R: Rng + ?Sized>(
    filter: &FilterMoments,
    model: &SyntheticDlm,
    rng: &mut R,
) -> Result<SmoothedPath> {
    check_filter_matches(filter, model)?;
    let h = filter.horizon();
    if h == 0 {
        return Err(Error::InvalidSpec("empty filter output".into()));
    }
    let mut means = vec![DVector::zeros(0); h];
    let mut covs = vec![DMatrix::zeros(0, 0); h];
    let last = &filter.steps[h - 1];
    means[h - 1] = sample_singular_normal(&last.mean, &last.cov, rng)?;
    covs[h - 1] = last.cov.clone();
    for t in (0..h - 1).rev() {
        let here = &filter.steps[t];
        let next = &filter.steps[t + 1];
        let (cond_mean, cond_cov) = match &next.prior_cov {
            PriorCovariance::Diffuse => (here.mean.clone(), here.cov.clone()),
            PriorCovariance::Finite(r) => {
                let gain = &here.cov * sym_pseudo_inverse(r, RANK_CUTOFF)?;
                let mean = &here.mean + &gain * (&means[t + 1] - &next.prior_mean);
                let mut cov = &here.cov - &gain * r * gain.transpose();
                linalg::symmetrize(&mut cov);
                (mean, cov)
            }
        };
        means[t] = sample_singular_normal(&cond_mean, &cond_cov, rng)?;
        covs[t] = cond_cov;
    }
    Ok(SmoothedPath { means, covariances: covs, kind: PathKind::Sampled })
}

/// [`backward_sample`] with a self-contained seeded generator.
pub fn backward_sample_seeded(
    filter: &FilterMoments,
    model: &SyntheticDlm,
    seed: u64,
) -> Result<SmoothedPath> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    backward_sample(filter, model, &mut rng)
}
