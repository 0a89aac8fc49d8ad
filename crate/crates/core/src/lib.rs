//! Multi-step portfolio decisions by posterior inference in a synthetic
//! state-space model.
//!
//! The crate turns a loss over weight trajectories (target tracking, risk,
//! turnover, optional weight shrinkage) into a Gaussian or conditionally
//! Gaussian state-space model whose posterior density is `exp(-loss/2)`.
//! Optimization then reduces to machinery with known good behavior: Kalman
//! filtering and smoothing for quadratic losses, an EM scheme over latent
//! scales for absolute-value penalties, and MCMC plus mixture mode search for
//! losses with steps profiled out.
//!
//! The [`ddnm`] module supplies the forecast inputs (a discounted
//! time-varying vector autoregression with directed contemporaneous
//! structure), [`backtest`] runs day-by-day investment experiments, and
//! [`config`]/[`report`] back the command-line driver.

pub mod backtest;
pub mod baselines;
pub mod config;
pub mod constraint;
pub mod ddnm;
pub mod em;
pub mod error;
pub mod ffbs;
pub mod linalg;
pub mod loss;
pub mod mcmc;
pub mod prices;
pub mod report;

pub use constraint::LinearConstraint;
pub use error::{Error, Result};
