//! Hard linear equality constraints on portfolio weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, RANK_CUTOFF};

/// Feasibility tolerance on the max-norm constraint residual.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// The affine constraint `A w = a` with `A` of full row rank.
///
/// The constraint is imposed exactly: evolution covariances are projected onto
/// the null space of `A`, so every filtered, smoothed, and sampled weight
/// vector satisfies it to numerical precision.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    matrix: DMatrix<f64>,
    value: DVector<f64>,
    /// Orthonormal basis of the null space of `A`, `k x (k - n)`.
    null_basis: DMatrix<f64>,
    /// Minimum-norm particular solution of `A w = a`.
    particular: DVector<f64>,
}

impl LinearConstraint {
    /// Builds the constraint, rejecting rank-deficient or over-determined
    /// systems.
    pub fn new(matrix: DMatrix<f64>, value: DVector<f64>) -> Result<Self> {
        let (n, k) = (matrix.nrows(), matrix.ncols());
        if n == 0 || k == 0 {
            return Err(Error::ShapeError("constraint: empty matrix".into()));
        }
        if value.len() != n {
            return Err(Error::ShapeError(format!(
                "constraint: matrix has {n} rows but value has {} entries",
                value.len()
            )));
        }
        if n >= k {
            return Err(Error::DegenerateConstraint(format!(
                "{n} constraints leave no freedom in {k} assets"
            )));
        }
        if matrix.iter().chain(value.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("constraint: non-finite entry".into()));
        }

        // Null basis and rank from the spectral decomposition of A'A.
        let gram = matrix.tr_mul(&matrix);
        let eig = gram.symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |a, &x| a.max(x));
        let cut = RANK_CUTOFF * max_eig;
        let null_cols: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] <= cut).collect();
        let rank = k - null_cols.len();
        if rank < n {
            return Err(Error::DegenerateConstraint(format!(
                "constraint matrix has row rank {rank} < {n}"
            )));
        }
        let mut null_basis = DMatrix::zeros(k, null_cols.len());
        for (c, &i) in null_cols.iter().enumerate() {
            null_basis.set_column(c, &eig.eigenvectors.column(i));
        }

        // particular = A' (A A')^{-1} a
        let aat = &matrix * matrix.transpose();
        let chol = linalg::spd_cholesky(&aat, "constraint A A'")
            .map_err(|_| Error::DegenerateConstraint("A A' not invertible".into()))?;
        let particular = matrix.tr_mul(&chol.solve(&value));

        Ok(Self { matrix, value, null_basis, particular })
    }

    /// The budget constraint `1' w = 1`.
    pub fn sum_to_one(k: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(1, k, 1.0), DVector::from_element(1, 1.0))
    }

    /// True when this is exactly a single all-ones row with value one.
    pub fn is_sum_to_one(&self) -> bool {
        self.matrix.nrows() == 1
            && self.matrix.iter().all(|&x| (x - 1.0).abs() < 1e-14)
            && (self.value[0] - 1.0).abs() < 1e-14
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn assets(&self) -> usize {
        self.matrix.ncols()
    }

    /// Orthonormal basis of the feasible directions, `k x (k - n)`.
    pub fn null_basis(&self) -> &DMatrix<f64> {
        &self.null_basis
    }

    /// `A w - a`.
    pub fn residual(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.matrix * w - &self.value
    }

    pub fn is_feasible(&self, w: &DVector<f64>, tol: f64) -> bool {
        let scale = self.value.amax().max(1.0);
        self.residual(w).amax() <= tol * scale
    }

    /// Nearest feasible point in the Euclidean metric.
    pub fn project_point(&self, w: &DVector<f64>) -> DVector<f64> {
        let tangential = self.null_basis.tr_mul(w);
        &self.particular + &self.null_basis * tangential
    }

    /// Projects an evolution covariance onto the constraint's null space:
    /// `W = V - V A' (A V A')^{-1} A V`, so that increments under `W` never
    /// move the constraint residual.
    pub fn project_covariance(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let k = self.assets();
        if v.nrows() != k || v.ncols() != k {
            return Err(Error::ShapeError(format!(
                "covariance is {}x{}, constraint expects {k}x{k}",
                v.nrows(),
                v.ncols()
            )));
        }
        linalg::check_symmetric(v, "evolution covariance")?;
        let scale = self.matrix.amax().powi(2) * v.amax() * k as f64;
        if self.matrix.nrows() == 1 && is_diagonal(v) {
            return self.project_diagonal_single_row(v, scale);
        }
        let av = &self.matrix * v;
        let avat = &av * self.matrix.transpose();
        // A V A' can come out numerically positive even when V annihilates the
        // row space of A; compare against the scale of A and V before factoring.
        if avat.amax() <= RANK_CUTOFF * scale {
            return Err(Error::DegenerateConstraint(
                "evolution covariance is singular along the constraint".into(),
            ));
        }
        let chol = linalg::spd_cholesky(&avat, "A V A'").map_err(|_| {
            Error::DegenerateConstraint(
                "evolution covariance is singular along the constraint".into(),
            )
        })?;
        let mut w = v - av.tr_mul(&chol.solve(&av));
        linalg::symmetrize(&mut w);
        Ok(w)
    }

    /// Single-row constraint on a diagonal covariance, rearranged so every
    /// entry of `W` is a ratio of nonnegative products. The general formula
    /// subtracts nearly equal numbers and smears `eps * max(tau)` of absolute
    /// error over a result that can be many orders of magnitude smaller,
    /// which matters when latent scales span a wide range.
    fn project_diagonal_single_row(&self, v: &DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
        let k = self.assets();
        let a = self.matrix.row(0);
        let weighted: Vec<f64> = (0..k).map(|i| a[i] * a[i] * v[(i, i)]).collect();
        let s: f64 = weighted.iter().sum();
        if s <= RANK_CUTOFF * scale {
            return Err(Error::DegenerateConstraint(
                "evolution covariance is singular along the constraint".into(),
            ));
        }
        let mut w = DMatrix::zeros(k, k);
        for i in 0..k {
            let rest: f64 = weighted
                .iter()
                .enumerate()
                .filter_map(|(l, &x)| (l != i).then_some(x))
                .sum();
            w[(i, i)] = v[(i, i)] * rest / s;
            for j in 0..i {
                let off = -(a[i] * v[(i, i)]) * (a[j] * v[(j, j)]) / s;
                w[(i, j)] = off;
                w[(j, i)] = off;
            }
        }
        Ok(w)
    }
}

fn is_diagonal(v: &DMatrix<f64>) -> bool {
    let k = v.nrows();
    (0..k).all(|i| (0..k).all(|j| i == j || v[(i, j)] == 0.0))
}
