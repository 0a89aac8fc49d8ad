//! Marginal optimization of the first-step decision for absolute-penalty
//! losses.
//!
//! Instead of profiling the later steps out (as EM does), the later steps are
//! integrated out: a Gibbs sampler alternates latent turnover scales and
//! weight trajectories, and the first-step marginal is approximated by a
//! Rao-Blackwellized equal-weight mixture of the per-sweep conditional
//! Gaussian margins. The marginal decision is the mode of that mixture,
//! located by a fixed-point iteration with multiple starts.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em::{estep_scales, EmConfig, ScaleKind};
use crate::error::{Error, Result};
use crate::ffbs::{backward_sample, backward_smooth, forward_filter};
use crate::linalg::{PsdFactor, RANK_CUTOFF};
use crate::loss::{conditional_emulator, solve_normal_multistep, ForecastMoments, LossFamily, LossSpec};

/// Floor on the `b` parameter of the latent-scale conditional when an
/// increment is exactly zero, keeping the draw proper.
const GIG_B_FLOOR: f64 = 1e-300;

/// Distance from a component's rank subspace beyond which its density is
/// treated as zero, relative to the evaluation point's offset norm. Must sit
/// well above sqrt(machine epsilon), the noise floor of the residual norm.
const SUBSPACE_TOL: f64 = 1e-6;

/// Threshold on the split-chain potential scale reduction factor below which
/// a chain is flagged as mixed.
pub const PSRF_THRESHOLD: f64 = 1.1;

/// Chain controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    /// Total sweeps including burn-in.
    pub iterations: usize,
    /// Sweeps discarded before collection; `None` means a fifth of
    /// `iterations`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    /// Keep every n-th post-burn-in sweep.
    pub thinning: usize,
    pub seed: u64,
    /// Jitter `c` in the constrained acceptance ratio
    /// `sqrt((c + 1'tau_new) / (c + 1'tau_old))`.
    pub constraint_jitter: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 2500,
            burn_in: None,
            thinning: 1,
            seed: 0,
            constraint_jitter: 1e-9,
        }
    }
}

impl McmcConfig {
    pub fn effective_burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.iterations / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be positive".into()));
        }
        if self.effective_burn_in() >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "burn-in {} must be below iterations {}",
                self.effective_burn_in(),
                self.iterations
            )));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidParameter("thinning must be at least 1".into()));
        }
        if !(self.constraint_jitter > 0.0) || !self.constraint_jitter.is_finite() {
            return Err(Error::InvalidParameter(
                "constraint jitter must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// One exact draw from `GIG(1/2, a, b)`, the distribution with density
/// proportional to `x^{-1/2} exp(-(a x + b / x) / 2)`.
///
/// Implemented through the reciprocal inverse-Gaussian representation: if
/// `Y ~ IG(mu = sqrt(a/b), shape = a)` then `1/Y` has the target law. The
/// smaller candidate root is computed in a cancellation-free form so extreme
/// parameter ratios (e.g. `b` near the 1e-300 floor) stay finite.
pub fn sample_gig_half<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::InvalidParameter(format!("GIG parameter a = {a}")));
    }
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidParameter(format!("GIG parameter b = {b}")));
    }
    let sqrt_a = a.sqrt();
    let sqrt_b = b.sqrt();
    let mu = sqrt_a / sqrt_b;
    let z: f64 = StandardNormal.sample(rng);
    let y = z * z;
    // r = mu * y / shape with shape = a.
    let r = y / (sqrt_a * sqrt_b);
    let root = r.sqrt() * (1.0 + 0.25 * r).sqrt();
    let denom = 1.0 + 0.5 * r + root;
    let x_minus = mu / denom;
    let u: f64 = rng.random();
    let draw = if u <= mu / (mu + x_minus) { x_minus } else { mu * denom };
    Ok(draw.recip())
}

/// Accept/reject for a single-coordinate independence proposal of the
/// step-`t` scale vector under the budget constraint.
///
/// The proposal comes from the unconstrained conditional, so the ratio
/// reduces to `sqrt((c + 1'tau_new) / (c + 1'tau_old))`, clipped at one.
pub fn mh_accept_constrained<R: Rng + ?Sized>(
    proposed: &[f64],
    current: &[f64],
    c: f64,
    rng: &mut R,
) -> Result<bool> {
    if proposed.len() != current.len() {
        return Err(Error::ShapeError("scale vectors differ in length".into()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParameter("jitter must be positive".into()));
    }
    let new_sum: f64 = proposed.iter().sum();
    let old_sum: f64 = current.iter().sum();
    let ratio = ((c + new_sum) / (c + old_sum)).sqrt();
    if ratio >= 1.0 {
        return Ok(true);
    }
    Ok(rng.random::<f64>() < ratio)
}

/// Mutable sampler state: the latent scale matrix (`k x h`, zero columns at
/// steps whose turnover penalty is disabled) and the current trajectory.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub turnover_scales: DMatrix<f64>,
    pub path: Vec<DVector<f64>>,
}

/// Per-sweep byproducts: the Rao-Blackwellized first-step margin and the
/// accept/propose counts of the constrained scale updates.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub smoothed_mean: DVector<f64>,
    pub smoothed_cov: DMatrix<f64>,
    pub accepted: u64,
    pub proposed: u64,
}

/// One Gibbs sweep: refresh every active scale from its conditional (with
/// per-coordinate Metropolis correction under a constraint), then redraw the
/// trajectory by backward sampling, recording the smoothed first-step margin
/// from the same filter pass.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut ChainState,
    moments: &ForecastMoments,
    spec: &LossSpec,
    cfg: &McmcConfig,
    rng: &mut R,
) -> Result<SweepRecord> {
    let (k, h) = (spec.assets(), spec.horizon());
    let constrained = spec.constraint.is_some();
    let mut accepted = 0u64;
    let mut proposed = 0u64;

    for t in 0..h {
        if !spec.lambda[t].is_finite() {
            continue;
        }
        // The absolute penalty exp(-|delta|/lambda) is the scale mixture
        // with variance prior Exp(1/(2 lambda^2)), so the scale conditional
        // is GIG(1/2, 1/lambda^2, delta^2).
        let a = 1.0 / (spec.lambda[t] * spec.lambda[t]);
        let prev: DVector<f64> = if t == 0 {
            spec.initial_weights.clone()
        } else {
            state.path[t - 1].clone()
        };
        for j in 0..k {
            let delta = state.path[t][j] - prev[j];
            let b = (delta * delta).max(GIG_B_FLOOR);
            let draw = sample_gig_half(a, b, rng)?;
            if constrained {
                proposed += 1;
                let current: Vec<f64> = state.turnover_scales.column(t).iter().copied().collect();
                let mut candidate = current.clone();
                candidate[j] = draw;
                if mh_accept_constrained(&candidate, &current, cfg.constraint_jitter, rng)? {
                    accepted += 1;
                    state.turnover_scales[(j, t)] = draw;
                }
            } else {
                state.turnover_scales[(j, t)] = draw;
            }
        }
    }

    let model = conditional_emulator(moments, spec, &state.turnover_scales, None)?;
    let filter = forward_filter(&model)?;
    let smoothed = backward_smooth(&filter, &model)?;
    state.path = backward_sample(&filter, &model, rng)?.means;

    Ok(SweepRecord {
        smoothed_mean: smoothed.means[0].clone(),
        smoothed_cov: smoothed.covariances[0].clone(),
        accepted,
        proposed,
    })
}

/// Split-chain potential scale reduction factor of a scalar series.
///
/// Returns `None` when the series is too short to split meaningfully.
fn split_psrf(series: &[f64]) -> Option<f64> {
    let n = series.len() / 2;
    if n < 4 {
        return None;
    }
    let a = &series[..n];
    let b = &series[series.len() - n..];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let var = |s: &[f64], m: f64| {
        s.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (s.len() - 1) as f64
    };
    let (ma, mb) = (mean(a), mean(b));
    let w = 0.5 * (var(a, ma) + var(b, mb));
    let bvar = 0.5 * n as f64 * (ma - mb) * (ma - mb);
    let scale = ma.abs().max(mb.abs()).max(1.0);
    if w <= 1e-28 * scale * scale {
        // Both halves are numerically constant.
        return Some(1.0);
    }
    let vhat = (n as f64 - 1.0) / n as f64 * w + bvar / n as f64;
    Some((vhat / w).sqrt())
}

/// Mixing diagnostics over scalar chain summaries.
#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    /// Split-chain PSRF of `1'|w_1|` per kept sweep.
    pub psrf_abs_weight: Option<f64>,
    /// Split-chain PSRF of the first-step portfolio standard deviation.
    pub psrf_portfolio_sd: Option<f64>,
    /// All available PSRFs fall below [`PSRF_THRESHOLD`].
    pub mixed: bool,
}

/// Output of [`run_chain`]: the first-step mixture plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub mixture: MixtureOfNormals,
    /// Acceptance rate of constrained scale proposals (1.0 when no
    /// constraint was active, as every draw is then exact).
    pub acceptance_rate: f64,
    pub diagnostics: ChainDiagnostics,
    /// Final sampler state, checkpointable via [`ChainRun::checkpoint`].
    pub state: ChainState,
    /// Sweeps contributing components.
    pub kept: usize,
    accepted: u64,
    proposed: u64,
    completed: usize,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    summaries: Vec<[f64; 2]>,
}

impl ChainRun {
    /// Serializable snapshot from which [`run_chain_from`] continues the
    /// chain as if it had never stopped.
    pub fn checkpoint(&self) -> ChainCheckpoint {
        let k = self.state.turnover_scales.nrows();
        let h = self.state.turnover_scales.ncols();
        ChainCheckpoint {
            version: CHECKPOINT_VERSION,
            assets: k,
            horizon: h,
            completed: self.completed,
            turnover_scales: self.state.turnover_scales.iter().copied().collect(),
            path: self.state.path.iter().flat_map(|w| w.iter().copied()).collect(),
            accepted: self.accepted,
            proposed: self.proposed,
            rng_seed: self.rng_seed,
            rng_stream: self.rng_stream,
            rng_word_pos: self.rng_word_pos,
            components: self
                .mixture
                .components()
                .map(|(m, c)| CheckpointComponent {
                    mean: m.iter().copied().collect(),
                    cov: c.iter().copied().collect(),
                })
                .collect(),
            summaries: self.summaries.clone(),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized chain state; see [`ChainRun::checkpoint`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub version: u32,
    pub assets: usize,
    pub horizon: usize,
    pub completed: usize,
    /// Column-major `k x h`.
    pub turnover_scales: Vec<f64>,
    /// `h` blocks of `k`.
    pub path: Vec<f64>,
    pub accepted: u64,
    pub proposed: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub components: Vec<CheckpointComponent>,
    pub summaries: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointComponent {
    pub mean: Vec<f64>,
    /// Column-major `k x k`.
    pub cov: Vec<f64>,
}

pub fn save_checkpoint(checkpoint: &ChainCheckpoint, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(BufWriter::new(file), checkpoint)
        .map_err(|e| Error::Parse(format!("writing checkpoint: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<ChainCheckpoint> {
    let file = std::fs::File::open(path)?;
    let cp: ChainCheckpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("reading checkpoint: {e}")))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            cp.version
        )));
    }
    Ok(cp)
}

fn validate_chain_spec(spec: &LossSpec) -> Result<()> {
    if spec.family != LossFamily::Laplace {
        return Err(Error::InvalidSpec(format!(
            "chain sampler supports the laplace family, got {}",
            spec.family.as_str()
        )));
    }
    if let Some(c) = &spec.constraint {
        if !c.is_sum_to_one() {
            return Err(Error::InvalidSpec(
                "constrained sampling supports the budget constraint only".into(),
            ));
        }
    }
    Ok(())
}

/// Runs a fresh chain; see [`run_chain_from`].
pub fn run_chain(
    moments: &ForecastMoments,
    spec: &LossSpec,
    cfg: &McmcConfig,
) -> Result<ChainRun> {
    run_chain_from(moments, spec, cfg, None)
}

/// Runs the Gibbs sampler to completion, optionally resuming from a
/// checkpoint taken with the same inputs.
///
/// Initialization is the quadratic-loss solution with scales closed at that
/// path. A resumed run reproduces the uninterrupted one bit for bit: the
/// generator state, collected components, and counters are all restored.
pub fn run_chain_from(
    moments: &ForecastMoments,
    spec: &LossSpec,
    cfg: &McmcConfig,
    resume: Option<&ChainCheckpoint>,
) -> Result<ChainRun> {
    cfg.validate()?;
    validate_chain_spec(spec)?;
    let (k, h) = (spec.assets(), spec.horizon());
    let burn = cfg.effective_burn_in();
    let sigma1 = moments.covariance(0).clone();

    let mut state;
    let mut rng;
    let mut components: Vec<(DVector<f64>, DMatrix<f64>)>;
    let mut summaries: Vec<[f64; 2]>;
    let mut accepted;
    let mut proposed;
    let start;
    match resume {
        Some(cp) => {
            if cp.assets != k || cp.horizon != h {
                return Err(Error::ShapeError(format!(
                    "checkpoint is {}x{}, spec is {k}x{h}",
                    cp.assets, cp.horizon
                )));
            }
            if cp.completed > cfg.iterations {
                return Err(Error::InvalidParameter(format!(
                    "checkpoint already covers {} of {} sweeps",
                    cp.completed, cfg.iterations
                )));
            }
            state = ChainState {
                turnover_scales: DMatrix::from_column_slice(k, h, &cp.turnover_scales),
                path: cp.path.chunks(k).map(DVector::from_row_slice).collect(),
            };
            rng = ChaCha12Rng::from_seed(cp.rng_seed);
            rng.set_stream(cp.rng_stream);
            rng.set_word_pos(cp.rng_word_pos);
            components = cp
                .components
                .iter()
                .map(|c| {
                    (
                        DVector::from_row_slice(&c.mean),
                        DMatrix::from_column_slice(k, k, &c.cov),
                    )
                })
                .collect();
            summaries = cp.summaries.clone();
            accepted = cp.accepted;
            proposed = cp.proposed;
            start = cp.completed;
        }
        None => {
            let mut normal = spec.clone();
            normal.family = LossFamily::Normal;
            let path = match solve_normal_multistep(moments, &normal) {
                Ok(p) => p.means,
                Err(_) => vec![spec.initial_weights.clone(); h],
            };
            let scales =
                estep_scales(&path, spec, ScaleKind::Turnover, &EmConfig::default())?;
            state = ChainState { turnover_scales: scales, path };
            rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            components = Vec::new();
            summaries = Vec::new();
            accepted = 0;
            proposed = 0;
            start = 0;
        }
    }

    for i in start..cfg.iterations {
        let record = gibbs_sweep(&mut state, moments, spec, cfg, &mut rng)?;
        accepted += record.accepted;
        proposed += record.proposed;
        if i >= burn && (i - burn) % cfg.thinning == 0 {
            let w1 = &state.path[0];
            let abs_sum: f64 = w1.iter().map(|x| x.abs()).sum();
            let sd = w1.dot(&(&sigma1 * w1)).max(0.0).sqrt();
            summaries.push([abs_sum, sd]);
            components.push((record.smoothed_mean, record.smoothed_cov));
        }
    }

    let mixture = MixtureOfNormals::new(components)?;
    let psrf_abs: Vec<f64> = summaries.iter().map(|s| s[0]).collect();
    let psrf_sd: Vec<f64> = summaries.iter().map(|s| s[1]).collect();
    let diagnostics = {
        let a = split_psrf(&psrf_abs);
        let b = split_psrf(&psrf_sd);
        let mixed = [a, b]
            .iter()
            .all(|p| p.map(|v| v < PSRF_THRESHOLD).unwrap_or(true));
        ChainDiagnostics { psrf_abs_weight: a, psrf_portfolio_sd: b, mixed }
    };
    Ok(ChainRun {
        kept: mixture.len(),
        acceptance_rate: if proposed == 0 {
            1.0
        } else {
            accepted as f64 / proposed as f64
        },
        diagnostics,
        rng_seed: rng.get_seed(),
        rng_stream: rng.get_stream(),
        rng_word_pos: rng.get_word_pos(),
        completed: cfg.iterations,
        accepted,
        proposed,
        summaries,
        state,
        mixture,
    })
}

#[derive(Debug, Clone)]
struct Component {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: PsdFactor,
    pinv: DMatrix<f64>,
    pinv_mean: DVector<f64>,
}

/// Equal-weight mixture of (possibly singular) Gaussians approximating the
/// first-step marginal.
#[derive(Debug, Clone)]
pub struct MixtureOfNormals {
    components: Vec<Component>,
    dim: usize,
    rank: usize,
}

impl MixtureOfNormals {
    /// Builds the mixture; all components must share dimension and numerical
    /// rank, since they approximate the same (possibly constrained)
    /// distribution.
    pub fn new(components: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidSpec("mixture has no components".into()));
        }
        let dim = components[0].0.len();
        let mut rank = None;
        let mut built = Vec::with_capacity(components.len());
        for (i, (mean, cov)) in components.into_iter().enumerate() {
            if mean.len() != dim || cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::ShapeError(format!(
                    "mixture component {i} has inconsistent dimension"
                )));
            }
            let factor = PsdFactor::new(&cov, RANK_CUTOFF)?;
            match rank {
                None => rank = Some(factor.rank()),
                Some(r) if r != factor.rank() => {
                    return Err(Error::InvalidSpec(format!(
                        "mixture component {i} has rank {} (expected {r})",
                        factor.rank()
                    )));
                }
                _ => {}
            }
            let pinv = factor.pseudo_inverse();
            let pinv_mean = &pinv * &mean;
            built.push(Component { mean, cov, factor, pinv, pinv_mean });
        }
        Ok(Self { components: built, dim, rank: rank.unwrap_or(0) })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Common numerical rank of the component covariances.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn components(&self) -> impl Iterator<Item = (&DVector<f64>, &DMatrix<f64>)> {
        self.components.iter().map(|c| (&c.mean, &c.cov))
    }

    /// Mean of the mixture (average of component means).
    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for c in &self.components {
            acc += &c.mean;
        }
        acc / self.components.len() as f64
    }

    fn component_log_density(&self, c: &Component, w: &DVector<f64>) -> f64 {
        let d = w - &c.mean;
        // Full-rank components have no off-subspace directions; the residual
        // there is sqrt(eps)-level rounding noise and must not veto the point.
        if c.factor.rank() < self.dim
            && c.factor.off_subspace_norm(&d) > SUBSPACE_TOL * d.norm().max(1.0)
        {
            return f64::NEG_INFINITY;
        }
        let r = c.factor.rank() as f64;
        -0.5 * (r * (2.0 * std::f64::consts::PI).ln()
            + c.factor.log_pseudo_det()
            + c.factor.quad_form(&d))
    }

    /// Log of the mixture density at `w`.
    ///
    /// Singular components are proper densities on their rank subspace
    /// (pseudo-determinant normalization); a point off every component's
    /// subspace has log density negative infinity.
    pub fn log_density(&self, w: &DVector<f64>) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| self.component_log_density(c, w))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln() - (self.components.len() as f64).ln()
    }
}

/// Free-function alias for [`MixtureOfNormals::log_density`].
pub fn mixture_logdensity(mixture: &MixtureOfNormals, w: &DVector<f64>) -> f64 {
    mixture.log_density(w)
}

/// Mode-search controls.
#[derive(Debug, Clone)]
pub struct ModeSearchConfig {
    /// Fixed-point searches launched from the highest-density component
    /// means.
    pub starts: usize,
    pub max_iters: usize,
    /// Stop when the max-abs step falls below this.
    pub tol: f64,
}

impl Default for ModeSearchConfig {
    fn default() -> Self {
        Self { starts: 10, max_iters: 1000, tol: 1e-10 }
    }
}

impl ModeSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 || self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "mode search needs at least one start and one iteration".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("mode search tol must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one fixed-point run.
#[derive(Debug, Clone)]
pub struct ModeResult {
    pub point: DVector<f64>,
    pub log_density: f64,
    /// `max-abs(w - map(w))` at the returned point.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// One application of the density-weighted fixed-point map; also returns the
/// component log-densities used for the weights.
fn fixed_point_map(mix: &MixtureOfNormals, w: &DVector<f64>) -> Result<DVector<f64>> {
    let logs: Vec<f64> = mix
        .components
        .iter()
        .map(|c| mix.component_log_density(c, w))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::FlatRegion(format!(
            "every mixture component has zero density at |w| = {:.3e}",
            w.norm()
        )));
    }
    let mut m = DMatrix::zeros(mix.dim, mix.dim);
    let mut v = DVector::zeros(mix.dim);
    let mut total = 0.0;
    for (c, &l) in mix.components.iter().zip(&logs) {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let u = (l - max).exp();
        total += u;
        m += &c.pinv * u;
        v.axpy(u, &c.pinv_mean, 1.0);
    }
    m /= total;
    v /= total;
    let factor = PsdFactor::new(&m, RANK_CUTOFF)?;
    // Solve on the range of the weighted precision; keep the component of w
    // living in the common null space (fixed by the constraint) unchanged.
    Ok(&factor.solve(&v) + (w - factor.project(w)))
}

/// Iterates the fixed-point map from `start` until the step norm falls below
/// `cfg.tol`.
///
/// Each iteration is an expectation-maximization step on the mixture
/// density, so the density at the iterates is non-decreasing.
pub fn fixed_point_mode(
    mix: &MixtureOfNormals,
    start: &DVector<f64>,
    cfg: &ModeSearchConfig,
) -> Result<ModeResult> {
    cfg.validate()?;
    if start.len() != mix.dim() {
        return Err(Error::ShapeError(format!(
            "start has dimension {}, mixture {}",
            start.len(),
            mix.dim()
        )));
    }
    let mut w = start.clone();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let next = fixed_point_map(mix, &w)?;
        let step = (&next - &w).amax();
        w = next;
        iterations += 1;
        if step < cfg.tol {
            converged = true;
            break;
        }
    }
    let residual = (&fixed_point_map(mix, &w)? - &w).amax();
    let log_density = mix.log_density(&w);
    Ok(ModeResult { point: w, log_density, residual, iterations, converged })
}

/// Outcome of the multi-start search.
#[derive(Debug, Clone)]
pub struct ModeSearchResult {
    pub point: DVector<f64>,
    pub log_density: f64,
    pub residual: f64,
    pub converged: bool,
    /// Set when every fixed-point run failed and the best component mean is
    /// returned instead.
    pub warning: bool,
}

/// Locates the mixture mode: ranks component means by mixture density,
/// launches fixed-point searches from the top `cfg.starts`, and returns the
/// highest-density endpoint.
///
/// The returned density is never below the best component-mean density,
/// because the search that starts there can only increase it.
pub fn find_marginal_mode(
    mix: &MixtureOfNormals,
    cfg: &ModeSearchConfig,
) -> Result<ModeSearchResult> {
    cfg.validate()?;
    let mut ranked: Vec<(usize, f64)> = mix
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| (i, mix.log_density(&c.mean)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let mut best: Option<ModeResult> = None;
    for &(i, _) in ranked.iter().take(cfg.starts.min(ranked.len())) {
        match fixed_point_mode(mix, &mix.components[i].mean, cfg) {
            Ok(r) => {
                if best
                    .as_ref()
                    .map(|b| r.log_density > b.log_density)
                    .unwrap_or(true)
                {
                    best = Some(r);
                }
            }
            Err(Error::FlatRegion(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    match best {
        Some(r) => Ok(ModeSearchResult {
            point: r.point,
            log_density: r.log_density,
            residual: r.residual,
            converged: r.converged,
            warning: false,
        }),
        None => {
            let (i, density) = ranked[0];
            Ok(ModeSearchResult {
                point: mix.components[i].mean.clone(),
                log_density: density,
                residual: f64::NAN,
                converged: false,
                warning: true,
            })
        }
    }
}
