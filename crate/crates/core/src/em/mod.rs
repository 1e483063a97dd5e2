//! Ordinary and modified EM for FIML factor analysis, plus the fit driver
//! shared by every estimator.

pub(crate) mod fit;
mod modified;
mod moments;
mod ordinary;

pub use fit::{fit, fit_em, fit_em_from, relative_change, Algorithm, EmVariant, FitConfig, FitResult};
pub use modified::{estep_modified, mstep_modified};
pub use moments::{conditional_factor_moments, conditional_full_moments, FactorMoments, FullMoments};
pub use ordinary::{estep_ordinary, mstep_ordinary, SufficientStats};

pub(crate) use modified::modified_stats;
pub(crate) use ordinary::estep_ordinary_with_loglik;

use crate::linalg::solve_spd_subset;
use crate::scalar::Scalar;

/// Solves one variable's normal equations `G β = h` over the first `free`
/// coefficients (the rest fixed at zero) and returns `β` with the expected
/// residual sum of squares `s − 2βᵀh + βᵀGβ`.
pub(crate) fn solve_row<T: Scalar>(gram: &[T], d: usize, resp: &[T], sq: T, free: usize) -> Option<(Vec<T>, T)> {
    let idx: Vec<usize> = (0..free).collect();
    let sub = solve_spd_subset(gram, d, resp, &idx)?;
    let mut beta = vec![T::zero(); d];
    beta[..free].copy_from_slice(&sub);
    let two = T::lit(2.0);
    let mut resid = sq;
    for r in 0..d {
        resid -= two * beta[r] * resp[r];
        let mut gb = T::zero();
        for c in 0..d {
            gb += gram[r * d + c] * beta[c];
        }
        resid += beta[r] * gb;
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((beta, resid))
}
