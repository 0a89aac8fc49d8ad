//! C interface to the one-shot portfolio solvers.
//!
//! A `PortemuMoments` handle owns per-step forecast means and precisions;
//! the solver entry points read it and write a single first-step weight
//! vector. Every call returns a status code; on anything but `Ok` a
//! thread-local message is available through
//! [`portemu_last_error_message`]. All weight buffers are caller-owned.

use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use nalgebra::{DMatrix, DVector};
use portemu::baselines::{markowitz_myopic, min_variance_bound};
use portemu::em::{em_solve, EmConfig};
use portemu::error::Error;
use portemu::loss::{solve_normal_multistep, ForecastMoments, LossFamily, LossSpec};
use portemu::LinearConstraint;

/// Result of every interface call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortemuStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments were structurally invalid (dimensions, signs, families).
    InvalidArgument = 2,
    /// The computation itself failed (degenerate inputs, no convergence).
    Failed = 3,
}

thread_local! {
    static LAST_ERROR: std::cell::RefCell<CString> =
        std::cell::RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PortemuStatus {
    match err {
        Error::InvalidSpec(_)
        | Error::InvalidParameter(_)
        | Error::ShapeError(_)
        | Error::Config(_)
        | Error::Parse(_) => PortemuStatus::InvalidArgument,
        _ => PortemuStatus::Failed,
    }
}

fn fail(err: &Error) -> PortemuStatus {
    set_error(&err.to_string());
    status_of(err)
}

fn guard(body: impl FnOnce() -> PortemuStatus) -> PortemuStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            PortemuStatus::Failed
        }
    }
}

/// Forecast moments for `horizon` steps over `assets` series; opaque.
pub struct PortemuMoments {
    inner: ForecastMoments,
}

/// Message describing the most recent failure on this thread.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn portemu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn portemu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build a moments handle.
///
/// `means` holds `horizon` blocks of `assets` values (step-major).
/// `precisions` holds `horizon` blocks of `assets * assets` values, each a
/// symmetric positive-definite matrix in column-major order. On success
/// `*out` owns the handle; release it with [`portemu_moments_free`].
///
/// # Safety
/// `means` must point to `horizon * assets` readable doubles, `precisions`
/// to `horizon * assets * assets`, and `out` to a writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn portemu_moments_new(
    assets: usize,
    horizon: usize,
    means: *const f64,
    precisions: *const f64,
    out: *mut *mut PortemuMoments,
) -> PortemuStatus {
    guard(|| {
        if means.is_null() || precisions.is_null() || out.is_null() {
            set_error("null pointer argument");
            return PortemuStatus::NullArgument;
        }
        if assets == 0 || horizon == 0 {
            set_error("assets and horizon must be positive");
            return PortemuStatus::InvalidArgument;
        }
        let mean_data = unsafe { std::slice::from_raw_parts(means, horizon * assets) };
        let prec_data =
            unsafe { std::slice::from_raw_parts(precisions, horizon * assets * assets) };
        let mut mean_vecs = Vec::with_capacity(horizon);
        let mut prec_mats = Vec::with_capacity(horizon);
        for t in 0..horizon {
            mean_vecs.push(DVector::from_column_slice(
                &mean_data[t * assets..(t + 1) * assets],
            ));
            prec_mats.push(DMatrix::from_column_slice(
                assets,
                assets,
                &prec_data[t * assets * assets..(t + 1) * assets * assets],
            ));
        }
        match ForecastMoments::new(mean_vecs, prec_mats) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(PortemuMoments { inner })) };
                PortemuStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Release a handle from [`portemu_moments_new`]; `handle` may be null.
///
/// # Safety
/// `handle` must be null or a pointer returned by `portemu_moments_new`
/// that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn portemu_moments_free(handle: *mut PortemuMoments) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of forecast steps in the handle.
///
/// # Safety
/// `handle` must be a live pointer from `portemu_moments_new`.
#[no_mangle]
pub unsafe extern "C" fn portemu_moments_horizon(handle: *const PortemuMoments) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.inner.horizon()
}

/// Number of assets in the handle.
///
/// # Safety
/// `handle` must be a live pointer from `portemu_moments_new`.
#[no_mangle]
pub unsafe extern "C" fn portemu_moments_assets(handle: *const PortemuMoments) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &*handle }.inner.assets()
}

unsafe fn moments_and_out<'a>(
    handle: *const PortemuMoments,
    out_weights: *mut f64,
) -> Result<(&'a ForecastMoments, &'a mut [f64]), PortemuStatus> {
    if handle.is_null() || out_weights.is_null() {
        set_error("null pointer argument");
        return Err(PortemuStatus::NullArgument);
    }
    let moments = unsafe { &(*handle).inner };
    let out = unsafe { std::slice::from_raw_parts_mut(out_weights, moments.assets()) };
    Ok((moments, out))
}

/// Myopic mean-variance weights from the first-step moments, subject to
/// the expected-return target and the unit budget.
///
/// # Safety
/// `handle` must be live and `out_weights` must point to `assets` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn portemu_markowitz(
    handle: *const PortemuMoments,
    target: f64,
    out_weights: *mut f64,
) -> PortemuStatus {
    guard(|| {
        let (moments, out) = match unsafe { moments_and_out(handle, out_weights) } {
            Ok(v) => v,
            Err(s) => return s,
        };
        match markowitz_myopic(moments.mean(0), moments.precision(0), target) {
            Ok(w) => {
                out.copy_from_slice(w.as_slice());
                PortemuStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Minimum-variance weights and the standard-deviation bound they attain.
///
/// # Safety
/// `handle` must be live, `out_weights` must point to `assets` writable
/// doubles, and `out_bound` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn portemu_min_variance(
    handle: *const PortemuMoments,
    out_weights: *mut f64,
    out_bound: *mut f64,
) -> PortemuStatus {
    guard(|| {
        if out_bound.is_null() {
            set_error("null pointer argument");
            return PortemuStatus::NullArgument;
        }
        let (moments, out) = match unsafe { moments_and_out(handle, out_weights) } {
            Ok(v) => v,
            Err(s) => return s,
        };
        match min_variance_bound(moments.precision(0)) {
            Ok(mv) => {
                out.copy_from_slice(mv.weights.as_slice());
                unsafe { *out_bound = mv.sd_bound };
                PortemuStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

fn constant_spec(
    family: LossFamily,
    moments: &ForecastMoments,
    alpha: f64,
    beta: f64,
    lambda: f64,
    gamma: f64,
    target: f64,
    initial_weights: &[f64],
) -> Result<LossSpec, Error> {
    let k = moments.assets();
    if initial_weights.len() != k {
        return Err(Error::ShapeError(format!(
            "{} initial weights for {k} assets",
            initial_weights.len()
        )));
    }
    LossSpec::constant(
        family,
        alpha,
        beta,
        lambda,
        gamma,
        target,
        moments.horizon(),
        DVector::from_column_slice(initial_weights),
        Some(LinearConstraint::sum_to_one(k)?),
    )
}

/// First-step decision of the multi-step quadratic-turnover solve.
///
/// The loss weighs target tracking by `1/alpha`, risk by `1/beta`, and
/// squared turnover by `1/lambda` at every step; `initial_weights` are the
/// current holdings and must sum to one.
///
/// # Safety
/// `handle` must be live; `initial_weights` must point to `assets` readable
/// doubles and `out_weights` to `assets` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn portemu_solve_normal(
    handle: *const PortemuMoments,
    alpha: f64,
    beta: f64,
    lambda: f64,
    target: f64,
    initial_weights: *const f64,
    out_weights: *mut f64,
) -> PortemuStatus {
    guard(|| {
        if initial_weights.is_null() {
            set_error("null pointer argument");
            return PortemuStatus::NullArgument;
        }
        let (moments, out) = match unsafe { moments_and_out(handle, out_weights) } {
            Ok(v) => v,
            Err(s) => return s,
        };
        let w0 = unsafe { std::slice::from_raw_parts(initial_weights, moments.assets()) };
        let spec = match constant_spec(
            LossFamily::Normal,
            moments,
            alpha,
            beta,
            lambda,
            f64::INFINITY,
            target,
            w0,
        ) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match solve_normal_multistep(moments, &spec) {
            Ok(path) => {
                out.copy_from_slice(path.means[0].as_slice());
                PortemuStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// First-step decision of the absolute-turnover solve (profiled path via
/// the latent-scale EM iteration). `gamma` adds weight shrinkage when
/// finite; pass INFINITY to disable it.
///
/// # Safety
/// `handle` must be live; `initial_weights` must point to `assets` readable
/// doubles and `out_weights` to `assets` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn portemu_solve_profiled(
    handle: *const PortemuMoments,
    alpha: f64,
    beta: f64,
    lambda: f64,
    gamma: f64,
    target: f64,
    initial_weights: *const f64,
    out_weights: *mut f64,
) -> PortemuStatus {
    guard(|| {
        if initial_weights.is_null() {
            set_error("null pointer argument");
            return PortemuStatus::NullArgument;
        }
        let (moments, out) = match unsafe { moments_and_out(handle, out_weights) } {
            Ok(v) => v,
            Err(s) => return s,
        };
        let w0 = unsafe { std::slice::from_raw_parts(initial_weights, moments.assets()) };
        let family = if gamma.is_finite() {
            LossFamily::ExtendedLaplace
        } else {
            LossFamily::Laplace
        };
        let spec = match constant_spec(family, moments, alpha, beta, lambda, gamma, target, w0) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match em_solve(moments, &spec, &EmConfig::default()) {
            Ok(solution) => {
                out.copy_from_slice(solution.decision().as_slice());
                PortemuStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
