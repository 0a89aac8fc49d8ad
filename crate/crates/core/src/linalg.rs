//! Shared dense linear algebra helpers for symmetric matrices.
//!
//! Covariances in this crate are frequently rank-deficient by construction
//! (linear constraints are imposed through singular evolution covariances), so
//! inverses are Moore-Penrose pseudo-inverses with an explicit eigenvalue
//! cutoff rather than plain factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used when deciding the numerical rank of a
/// covariance: eigenvalues below `RANK_CUTOFF` times the largest eigenvalue
/// are treated as exact zeros.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Maximum tolerated relative asymmetry before a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Largest absolute entry, or zero for an empty matrix.
pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Checks that `m` is square and symmetric within [`SYMMETRY_TOL`] relative to
/// its largest entry.
pub fn check_symmetric(m: &DMatrix<f64>, context: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::ShapeError(format!(
            "{context}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = max_abs(m).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidCovariance(format!(
                    "{context}: asymmetric at ({i},{j})"
                )));
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidCovariance(format!(
            "{context}: non-finite entry"
        )));
    }
    Ok(())
}

/// Cholesky factorization with a descriptive error instead of an `Option`.
pub(crate) fn spd_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    check_symmetric(m, context)?;
    Cholesky::new(m.clone()).ok_or_else(|| {
        Error::InvalidCovariance(format!("{context}: not positive definite"))
    })
}

/// Rejection line for negative eigenvalues, relative to the largest one.
/// Eigensolver noise on rank-deficient products routinely reaches a few
/// hundred ulps of the matrix scale, so rejection must sit well above the
/// clipping cutoff.
const NEG_EIG_TOL: f64 = 1e-8;

/// Eigendecomposition of a symmetric positive semi-definite matrix with the
/// small and slightly negative eigenvalues produced by roundoff clipped to
/// zero.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues below
/// `tol * max_eigenvalue` set to exactly zero. Eigenvalues more negative
/// than `NEG_EIG_TOL` relative are rejected as an invalid covariance.
fn clipped_eigen(m: &DMatrix<f64>, tol: f64, context: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_symmetric(m, context)?;
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |a, &x| a.max(x));
    let cut = tol * max_eig;
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < -(NEG_EIG_TOL * max_eig).max(tol) {
            return Err(Error::InvalidCovariance(format!(
                "{context}: negative eigenvalue {v:.3e}"
            )));
        }
        if *v <= cut {
            *v = 0.0;
        }
    }
    Ok((values, eig.eigenvectors))
}

/// Restores positive semi-definiteness after a covariance update whose prior
/// scale dwarfs the posterior.
///
/// Conditioning a prior of scale `s` down to an `O(1)` posterior leaves
/// absolute errors of order `eps * s` behind, even in Joseph form, and those
/// can push small eigenvalues negative. Negative eigenvalues within the
/// roundoff bound are clipped to zero; anything larger indicates a real
/// indefiniteness and is rejected.
pub(crate) fn clip_update_roundoff(
    m: &mut DMatrix<f64>,
    prior_scale: f64,
    context: &str,
) -> Result<()> {
    let n = m.nrows();
    let bound = 256.0 * f64::EPSILON * n as f64 * prior_scale.max(m.amax());
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(());
    }
    if min < -bound {
        return Err(Error::InvalidCovariance(format!(
            "{context}: eigenvalue {min:.3e} below the update roundoff bound {bound:.3e}"
        )));
    }
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
    symmetrize(m);
    Ok(())
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semi-definite matrix.
///
/// Eigenvalues below `tol` times the largest eigenvalue count as zero. The
/// zero matrix maps to the zero matrix. Asymmetric or indefinite input is
/// rejected.
pub fn sym_pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    Ok(sym_pseudo_inverse_rank(m, tol)?.0)
}

/// [`sym_pseudo_inverse`] that also reports the numerical rank.
pub fn sym_pseudo_inverse_rank(m: &DMatrix<f64>, tol: f64) -> Result<(DMatrix<f64>, usize)> {
    let (values, vectors) = clipped_eigen(m, tol, "pseudo-inverse")?;
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            rank += 1;
            let col = vectors.column(i);
            // out += v^-1 * col * col'
            out.ger(1.0 / v, &col, &col, 1.0);
        }
    }
    symmetrize(&mut out);
    Ok((out, rank))
}

/// Spectral factorization of a PSD matrix retained for repeated density and
/// sampling work: kept eigenpairs, numerical rank, and log pseudo-determinant.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    dim: usize,
    rank: usize,
    /// `dim x rank` matrix of kept eigenvectors.
    basis: DMatrix<f64>,
    /// Kept eigenvalues, all strictly positive.
    eigenvalues: Vec<f64>,
    log_pdet: f64,
}

impl PsdFactor {
    pub fn new(cov: &DMatrix<f64>, tol: f64) -> Result<Self> {
        let (values, vectors) = clipped_eigen(cov, tol, "psd factor")?;
        let dim = cov.nrows();
        let kept: Vec<usize> = (0..dim).filter(|&i| values[i] > 0.0).collect();
        let rank = kept.len();
        let mut basis = DMatrix::zeros(dim, rank);
        let mut eigenvalues = Vec::with_capacity(rank);
        for (c, &i) in kept.iter().enumerate() {
            basis.set_column(c, &vectors.column(i));
            eigenvalues.push(values[i]);
        }
        let log_pdet = eigenvalues.iter().map(|v| v.ln()).sum();
        Ok(Self { dim, rank, basis, eigenvalues, log_pdet })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn log_pseudo_det(&self) -> f64 {
        self.log_pdet
    }

    /// `d' C^+ d` using only the retained subspace.
    pub fn quad_form(&self, d: &DVector<f64>) -> f64 {
        let proj = self.basis.tr_mul(d);
        proj.iter()
            .zip(&self.eigenvalues)
            .map(|(p, v)| p * p / v)
            .sum()
    }

    /// Euclidean norm of the component of `d` outside the retained subspace.
    pub fn off_subspace_norm(&self, d: &DVector<f64>) -> f64 {
        let proj = self.basis.tr_mul(d);
        (d.norm_squared() - proj.norm_squared()).max(0.0).sqrt()
    }

    /// Orthogonal projector onto the retained subspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Projects `d` onto the retained subspace.
    pub fn project(&self, d: &DVector<f64>) -> DVector<f64> {
        &self.basis * self.basis.tr_mul(d)
    }

    /// Applies the pseudo-inverse: the least-norm solution of `C x = v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut proj = self.basis.tr_mul(v);
        for (p, eig) in proj.iter_mut().zip(&self.eigenvalues) {
            *p /= eig;
        }
        &self.basis * proj
    }

    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (i, &v) in self.eigenvalues.iter().enumerate() {
            let col = self.basis.column(i);
            out.ger(1.0 / v, &col, &col, 1.0);
        }
        symmetrize(&mut out);
        out
    }

    /// Draws `mean + B diag(sqrt(eig)) z` with standard normal `z`, i.e. a
    /// sample confined to the retained subspace.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mut out = mean.clone();
        for (i, &v) in self.eigenvalues.iter().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            out.axpy(v.sqrt() * z, &self.basis.column(i).clone_owned(), 1.0);
        }
        out
    }
}

/// Samples from `N(mean, cov)` where `cov` may be singular; the draw is
/// restricted to the numerical range of `cov` at the [`RANK_CUTOFF`] level.
pub fn sample_singular_normal<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = PsdFactor::new(cov, RANK_CUTOFF)?;
    Ok(factor.sample(mean, rng))
}
