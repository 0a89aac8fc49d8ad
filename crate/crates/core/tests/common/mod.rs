//! Independent reference computations shared by the integration suites.
//!
//! Everything here is deliberately redundant with the library: dense linear
//! algebra instead of filtering, direct formula evaluation instead of the
//! emulator, and brute-force minimization instead of EM. Agreement between
//! the two routes is the whole point.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use portemu::loss::{ForecastMoments, LossFamily, LossSpec};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_spd(k: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    &g * g.transpose() + DMatrix::identity(k, k) * 0.4
}

pub fn random_moments(k: usize, h: usize, rng: &mut ChaCha12Rng) -> ForecastMoments {
    let means = (0..h)
        .map(|_| DVector::from_fn(k, |_, _| rng.random_range(-0.6..0.9)))
        .collect();
    let precisions = (0..h).map(|_| random_spd(k, rng)).collect();
    ForecastMoments::new(means, precisions).unwrap()
}

pub fn feasible_w0(k: usize, constrained: bool, rng: &mut ChaCha12Rng) -> DVector<f64> {
    let mut w = DVector::from_fn(k, |_, _| rng.random_range(-0.5..1.0));
    if constrained {
        let shift = (1.0 - w.sum()) / k as f64;
        w.add_scalar_mut(shift);
    }
    w
}

/// Eigenvalue cutoff for pseudo-inverses and null bases, relative to the
/// largest eigenvalue.
const CUT: f64 = 1e-12;

fn sym_eig_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let v = eig.eigenvalues[i];
        if v.abs() > CUT * top {
            let col = eig.eigenvectors.column(i);
            out.ger(1.0 / v, &col, &col, 1.0);
        }
    }
    out
}

/// The turnover metric of a spec: pseudo-inverse of the (optionally
/// constraint-projected) per-asset base, recomputed from scratch.
fn turnover_metric(spec: &LossSpec) -> DMatrix<f64> {
    let k = spec.assets();
    let v = match &spec.turnover_scales {
        Some(s) => DMatrix::from_diagonal(s),
        None => DMatrix::identity(k, k),
    };
    match &spec.constraint {
        Some(c) => {
            let a = c.matrix();
            let av = a * &v;
            let avat = &av * a.transpose();
            let inv = avat.clone().try_inverse().expect("A V A' invertible");
            let projected = &v - av.tr_mul(&(&inv * &av));
            sym_eig_pinv(&projected)
        }
        None => sym_eig_pinv(&v),
    }
}

/// Dense stacked quadratic form of a normal-family loss: `L(x) = x' A x
/// - 2 b' x + const` over `x = (w_1, ..., w_h)`, plus the stacked equality
/// constraints (per-step budget rows and hard-target rows).
pub struct StackedQuadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `c x = d`; empty when the instance is unconstrained.
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub assets: usize,
    pub horizon: usize,
}

pub fn stack_normal_loss(moments: &ForecastMoments, spec: &LossSpec) -> StackedQuadratic {
    assert_eq!(spec.family, LossFamily::Normal, "oracle covers the normal family");
    let (k, h) = (spec.assets(), spec.horizon());
    let n = k * h;
    let p = turnover_metric(spec);
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);

    let add_block = |a: &mut DMatrix<f64>, r: usize, c: usize, m: &DMatrix<f64>, s: f64| {
        for i in 0..k {
            for j in 0..k {
                a[(r * k + i, c * k + j)] += s * m[(i, j)];
            }
        }
    };

    for t in 0..h {
        let f = moments.mean(t);
        if spec.alpha[t].is_finite() && spec.alpha[t] > 0.0 {
            let ff = f * f.transpose();
            add_block(&mut a, t, t, &ff, 1.0 / spec.alpha[t]);
            for i in 0..k {
                b[t * k + i] += spec.targets[t] * f[i] / spec.alpha[t];
            }
        }
        if spec.beta[t].is_finite() {
            let sigma = moments
                .precision(t)
                .clone()
                .try_inverse()
                .expect("precision invertible");
            add_block(&mut a, t, t, &sigma, 1.0 / spec.beta[t]);
        }
        if spec.lambda[t].is_finite() {
            let s = 1.0 / spec.lambda[t];
            add_block(&mut a, t, t, &p, s);
            if t == 0 {
                let pw0 = &p * &spec.initial_weights;
                for i in 0..k {
                    b[i] += s * pw0[i];
                }
            } else {
                add_block(&mut a, t - 1, t - 1, &p, s);
                add_block(&mut a, t, t - 1, &p, -s);
                add_block(&mut a, t - 1, t, &p, -s);
            }
        }
    }

    // Equality rows: per-step budget constraints, then hard targets.
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    if let Some(c) = &spec.constraint {
        for t in 0..h {
            for r in 0..c.matrix().nrows() {
                let mut row = DVector::zeros(n);
                for j in 0..k {
                    row[t * k + j] = c.matrix()[(r, j)];
                }
                rows.push(row);
                rhs.push(c.value()[r]);
            }
        }
    }
    for t in 0..h {
        if spec.alpha[t] == 0.0 {
            let f = moments.mean(t);
            let mut row = DVector::zeros(n);
            for j in 0..k {
                row[t * k + j] = f[j];
            }
            rows.push(row);
            rhs.push(spec.targets[t]);
        }
    }
    let (c, d) = if rows.is_empty() {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    } else {
        let mut c = DMatrix::zeros(rows.len(), n);
        for (i, row) in rows.iter().enumerate() {
            c.set_row(i, &row.transpose());
        }
        (c, DVector::from_vec(rhs))
    };

    StackedQuadratic { a, b, c, d, assets: k, horizon: h }
}

/// Null-space basis of a wide matrix via the spectral decomposition of
/// `C' C`.
fn null_basis(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    let gram = c.tr_mul(c);
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, &x| a.max(x));
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= CUT * top).collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    basis
}

/// Solves `M x = r` by Cholesky with two rounds of iterative refinement.
fn refined_spd_solve(m: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let chol = m.clone().cholesky().expect("reduced system positive definite");
    let mut x = chol.solve(r);
    for _ in 0..2 {
        let resid = r - m * &x;
        x += chol.solve(&resid);
    }
    x
}

/// The posterior mode and per-step posterior covariances of the stacked
/// emulating Gaussian `exp(-L/2)`: mean solves the dense KKT system, the
/// covariance is the corresponding inverse restricted to the feasible
/// subspace.
pub struct DenseSolution {
    pub path: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

pub fn dense_normal_solve(moments: &ForecastMoments, spec: &LossSpec) -> DenseSolution {
    let q = stack_normal_loss(moments, spec);
    let (k, h) = (q.assets, q.horizon);
    let (mean, cov) = if q.c.nrows() == 0 {
        let x = refined_spd_solve(&q.a, &q.b);
        let cov = q.a.clone().try_inverse().expect("stacked Hessian invertible");
        (x, cov)
    } else {
        // x = x_p + N z with x_p a particular solution of C x = d.
        let ct = q.c.transpose();
        let cct = &q.c * &ct;
        let x_p = &ct * cct.clone().try_inverse().expect("constraints independent") * &q.d;
        let nb = null_basis(&q.c);
        let az = nb.tr_mul(&(&q.a * &nb));
        let rz = nb.tr_mul(&(&q.b - &q.a * &x_p));
        let z = refined_spd_solve(&az, &rz);
        let cov_z = az.clone().try_inverse().expect("reduced Hessian invertible");
        let mean = &x_p + &nb * z;
        let cov = &nb * cov_z * nb.transpose();
        (mean, cov)
    };
    let path = (0..h).map(|t| DVector::from(mean.rows(t * k, k).clone_owned())).collect();
    let covariances = (0..h)
        .map(|t| DMatrix::from(cov.view((t * k, t * k), (k, k)).clone_owned()))
        .collect();
    DenseSolution { path, covariances }
}

/// Loss evaluation straight from the definition, no library calls.
pub fn direct_loss(path: &[DVector<f64>], moments: &ForecastMoments, spec: &LossSpec) -> f64 {
    let h = spec.horizon();
    let metric = if spec.family == LossFamily::Normal
        && spec.lambda.iter().any(|l| l.is_finite())
    {
        Some(turnover_metric(spec))
    } else {
        None
    };
    let mut total = 0.0;
    for t in 0..h {
        let w = &path[t];
        if spec.alpha[t].is_finite() && spec.alpha[t] > 0.0 {
            let r = spec.targets[t] - moments.mean(t).dot(w);
            total += r * r / spec.alpha[t];
        }
        if spec.beta[t].is_finite() {
            let sigma = moments
                .precision(t)
                .clone()
                .try_inverse()
                .expect("precision invertible");
            total += w.dot(&(&sigma * w)) / spec.beta[t];
        }
        if spec.lambda[t].is_finite() {
            let prev = if t == 0 { &spec.initial_weights } else { &path[t - 1] };
            let delta = w - prev;
            match spec.family {
                LossFamily::Normal => {
                    let p = metric.as_ref().unwrap();
                    total += delta.dot(&(p * &delta)) / spec.lambda[t];
                }
                _ => {
                    total += 2.0 * delta.iter().map(|d| d.abs()).sum::<f64>() / spec.lambda[t];
                }
            }
        }
        if spec.gamma[t].is_finite() {
            total += 2.0 * w.iter().map(|x| x.abs()).sum::<f64>() / spec.gamma[t];
        }
    }
    total
}

/// Exact minimization of a 1-d continuous piecewise-quadratic function.
///
/// `eval` must be quadratic between consecutive kinks. Each piece is
/// recovered by 3-point interpolation, minimized in closed form, and the
/// winner over pieces and kinks is returned.
fn minimize_piecewise_quadratic<F: Fn(f64) -> f64>(
    eval: F,
    kinks: &[f64],
    span: f64,
) -> f64 {
    let mut pts: Vec<f64> = kinks.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * span.max(1.0));
    // Synthetic outer boundaries so every piece has a finite probe interval.
    let lo = pts.first().copied().unwrap_or(0.0) - span;
    let hi = pts.last().copied().unwrap_or(0.0) + span;
    let mut bounds = vec![lo];
    bounds.extend(pts.iter().copied());
    bounds.push(hi);

    let mut best_s = 0.0;
    let mut best_v = f64::INFINITY;
    let consider = |s: f64, v: f64, best_s: &mut f64, best_v: &mut f64| {
        if v < *best_v {
            *best_v = v;
            *best_s = s;
        }
    };
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a < 1e-13 * span.max(1.0) {
            continue;
        }
        // Three interior probes; the quadratic piece extends beyond [a, b]
        // only for the outer intervals, where extrapolated vertices are
        // clamped back.
        let x0 = a + (b - a) * 0.25;
        let x1 = a + (b - a) * 0.5;
        let x2 = a + (b - a) * 0.75;
        let (y0, y1, y2) = (eval(x0), eval(x1), eval(x2));
        // Fit y = p2 x^2 + p1 x + p0 through the probes.
        let d = (x0 - x1) * (x0 - x2) * (x1 - x2);
        let p2 = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / d;
        let p1 = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / d;
        if p2 > 0.0 {
            let vertex = (-p1 / (2.0 * p2)).clamp(a, b);
            consider(vertex, eval(vertex), &mut best_s, &mut best_v);
        }
        consider(a, eval(a), &mut best_s, &mut best_v);
        consider(b, eval(b), &mut best_s, &mut best_v);
    }
    best_s
}

/// Brute-force minimizer of a Laplace-family loss by exact line searches
/// over single coordinates (unconstrained), feasible coordinate pairs
/// (budget-constrained), and whole-tail shifts of either kind.
///
/// This is a descent method on a convex objective, so its final loss upper
/// bounds the global minimum; the library solve must come in at or below it.
pub fn coordinate_descent_oracle(
    moments: &ForecastMoments,
    spec: &LossSpec,
    start: &[DVector<f64>],
    sweeps: usize,
) -> (Vec<DVector<f64>>, f64) {
    assert_ne!(spec.family, LossFamily::Normal, "oracle covers Laplace families");
    let (k, h) = (spec.assets(), spec.horizon());
    let constrained = spec.constraint.is_some();
    let mut path: Vec<DVector<f64>> = start.to_vec();
    let span = 2.0 + path.iter().map(|w| w.amax()).fold(0.0_f64, f64::max);

    // Kinks of the loss along `path + s * dir`: one per absolute-value term
    // whose argument depends on s.
    let kinks_along = |path: &[DVector<f64>], dir: &[DVector<f64>]| -> Vec<f64> {
        let mut ks = Vec::new();
        for t in 0..h {
            if spec.lambda[t].is_finite() {
                let prev_w = if t == 0 { &spec.initial_weights } else { &path[t - 1] };
                let zero = DVector::zeros(k);
                let prev_d = if t == 0 { &zero } else { &dir[t - 1] };
                for j in 0..k {
                    let dd = dir[t][j] - prev_d[j];
                    if dd.abs() > 1e-14 {
                        ks.push(-(path[t][j] - prev_w[j]) / dd);
                    }
                }
            }
            if spec.gamma[t].is_finite() {
                for j in 0..k {
                    if dir[t][j].abs() > 1e-14 {
                        ks.push(-path[t][j] / dir[t][j]);
                    }
                }
            }
        }
        ks
    };

    let mut loss = direct_loss(&path, moments, spec);
    for _ in 0..sweeps {
        let before = loss;
        let mut directions: Vec<Vec<DVector<f64>>> = Vec::new();
        for t in 0..h {
            if constrained {
                for j in 0..k {
                    for l in (j + 1)..k {
                        // Single-step exchange.
                        let mut d = vec![DVector::zeros(k); h];
                        d[t][j] = 1.0;
                        d[t][l] = -1.0;
                        directions.push(d);
                        // Tail exchange: shift every later step the same way.
                        let mut d = vec![DVector::zeros(k); h];
                        for u in t..h {
                            d[u][j] = 1.0;
                            d[u][l] = -1.0;
                        }
                        directions.push(d);
                    }
                }
            } else {
                for j in 0..k {
                    let mut d = vec![DVector::zeros(k); h];
                    d[t][j] = 1.0;
                    directions.push(d);
                    let mut d = vec![DVector::zeros(k); h];
                    for u in t..h {
                        d[u][j] = 1.0;
                    }
                    directions.push(d);
                }
            }
        }
        for dir in directions {
            let ks = kinks_along(&path, &dir);
            let eval = |s: f64| {
                let cand: Vec<DVector<f64>> = path
                    .iter()
                    .zip(&dir)
                    .map(|(w, d)| w + d * s)
                    .collect();
                direct_loss(&cand, moments, spec)
            };
            let s = minimize_piecewise_quadratic(eval, &ks, span);
            let v = eval(s);
            if v < loss - 1e-15 * loss.abs().max(1.0) {
                for (w, d) in path.iter_mut().zip(&dir) {
                    *w += d * s;
                }
                loss = v;
            }
        }
        if before - loss <= 1e-13 * before.abs().max(1.0) {
            break;
        }
    }
    (path, loss)
}

/// Mean and batch-means standard error of a correlated scalar series.
pub fn batch_mean_se(series: &[f64]) -> (f64, f64) {
    let n = series.len();
    assert!(n >= 16, "series too short for batch means");
    let batches = (n as f64).sqrt().floor() as usize;
    let len = n / batches;
    let used = batches * len;
    let mean = series[..used].iter().sum::<f64>() / used as f64;
    let mut var = 0.0;
    for b in 0..batches {
        let m = series[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64;
        var += (m - mean) * (m - mean);
    }
    var /= (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

/// Simpson integration of `f` over `[lo, hi]` with `2n` panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let m = 2 * n;
    let dx = (hi - lo) / m as f64;
    let mut total = f(lo) + f(hi);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(lo + i as f64 * dx);
    }
    total * dx / 3.0
}
