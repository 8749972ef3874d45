//! Maximum likelihood and REML fitting of nested error regression models
//! (random-intercept linear mixed models) for clustered data, together with
//! the increasing-cluster-size asymptotic covariance, influence functions,
//! confidence intervals and a seeded Monte Carlo engine to check them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }};
}

pub mod asymptotics;
pub mod error;
pub mod estimation;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod normal;
pub mod simulation;
pub mod verify;

pub use error::{Error, Result};
