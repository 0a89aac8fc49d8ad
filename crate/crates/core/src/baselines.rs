//! Single-step closed-form portfolio baselines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Minimum-variance portfolio under the budget constraint, with the implied
/// lower bound on attainable portfolio standard deviation.
#[derive(Debug, Clone)]
pub struct MinVariancePortfolio {
    pub weights: DVector<f64>,
    pub sd_bound: f64,
}

/// Mean-variance weights for one step: minimize `w' K^{-1} w` subject to
/// `f' w = target` and `1' w = 1`, where `K` is the forecast precision.
///
/// The stationarity condition gives `w = K (mu_1 f + mu_2 1)` with the
/// multipliers solving a 2x2 system; a forecast mean proportional to the
/// all-ones vector makes that system singular and is rejected.
pub fn markowitz_myopic(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    target: f64,
) -> Result<DVector<f64>> {
    let k = mean.len();
    if precision.nrows() != k || precision.ncols() != k {
        return Err(Error::ShapeError(format!(
            "precision is {}x{} for {k} assets",
            precision.nrows(),
            precision.ncols()
        )));
    }
    if !target.is_finite() || mean.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite Markowitz input".into()));
    }
    linalg::check_symmetric(precision, "forecast precision")?;
    let ones = DVector::from_element(k, 1.0);
    let kf = precision * mean;
    let k1 = precision * &ones;
    let a = mean.dot(&kf);
    let b = mean.dot(&k1);
    let c = ones.dot(&k1);
    let det = a * c - b * b;
    let scale = (a * c).abs() + b * b;
    if det.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateConstraint(
            "return and budget targets are colinear (forecast mean is constant)".into(),
        ));
    }
    let mu1 = (target * c - b) / det;
    let mu2 = (a - target * b) / det;
    Ok(kf * mu1 + k1 * mu2)
}

/// Budget-constrained minimum-variance weights `K 1 / (1' K 1)` and the bound
/// `(1' K 1)^{-1/2}` that no feasible portfolio's standard deviation can
/// undercut.
pub fn min_variance_bound(precision: &DMatrix<f64>) -> Result<MinVariancePortfolio> {
    let k = precision.nrows();
    linalg::check_symmetric(precision, "forecast precision")?;
    let ones = DVector::from_element(k, 1.0);
    let k1 = precision * &ones;
    let total = ones.dot(&k1);
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidCovariance(
            "precision does not define a positive budget quadratic".into(),
        ));
    }
    Ok(MinVariancePortfolio {
        weights: k1 / total,
        sd_bound: total.sqrt().recip(),
    })
}
