//! Conditional moments of `(x, f)` given the observed part of one case.

use ndarray::{Array1, Array2};

use crate::error::{FimlError, Result};
use crate::likelihood::{precision_blocks, CaseScratch, PatternFactor};
use crate::model::FactorModel;
use crate::scalar::Scalar;

/// `E[f | x_obs]` and `E[f fᵀ | x_obs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMoments<T> {
    pub f_hat: Array1<T>,
    pub ff_hat: Array2<T>,
}

impl<T: Scalar> FactorMoments<T> {
    /// Posterior covariance `E[ffᵀ] − f̂f̂ᵀ`.
    pub fn covariance(&self) -> Array2<T> {
        let m = self.f_hat.len();
        Array2::from_shape_fn((m, m), |(i, j)| self.ff_hat[[i, j]] - self.f_hat[i] * self.f_hat[j])
    }

    fn prior(m: usize) -> Self {
        Self { f_hat: Array1::zeros(m), ff_hat: Array2::eye(m) }
    }
}

/// Posterior of the complete vector `(x, f)` given the observed coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FullMoments<T> {
    pub x_hat: Array1<T>,
    pub f_hat: Array1<T>,
    pub v_xx: Array2<T>,
    pub v_xf: Array2<T>,
    pub v_ff: Array2<T>,
}

fn check_case<T: Scalar>(model: &FactorModel<T>, values: &[T], mask: &[bool]) -> Result<()> {
    if values.len() != model.p() || mask.len() != model.p() {
        return Err(FimlError::Dimension(format!(
            "case has {} values and {} mask entries for {} variables",
            values.len(),
            mask.len(),
            model.p()
        )));
    }
    Ok(())
}

/// Posterior mean and covariance of `f` for one case, with `A = I + Λ_oᵀΨ_o⁻¹Λ_o`:
/// `f̂ = A⁻¹ Λ_oᵀ Ψ_o⁻¹ (x_o − μ_o)` and `V_ff = A⁻¹`.
///
/// A case with nothing observed returns the prior `N(0, I)`.
pub fn conditional_factor_moments<T: Scalar>(
    model: &FactorModel<T>,
    case_values: &[T],
    case_mask: &[bool],
) -> Result<FactorMoments<T>> {
    check_case(model, case_values, case_mask)?;
    let m = model.m();
    let observed: Vec<usize> = (0..model.p()).filter(|&i| case_mask[i]).collect();
    if observed.is_empty() {
        return Ok(FactorMoments::prior(m));
    }
    let blocks = precision_blocks(model)?;
    let mut pf = PatternFactor::new(m);
    pf.factor(model, &blocks, case_mask, &observed)?;
    pf.fill_inverse();
    let x: Vec<T> = observed.iter().map(|&i| case_values[i]).collect();
    let mut sc = CaseScratch::new(observed.len(), m);
    pf.case(&x, &mut sc.r, &mut sc.f);
    let f_hat = Array1::from_vec(sc.f);
    let ff_hat = Array2::from_shape_fn((m, m), |(i, j)| f_hat[i] * f_hat[j] + pf.a_inv[i * m + j]);
    Ok(FactorMoments { f_hat, ff_hat })
}

/// Posterior of `(x, f)`: observed coordinates are returned as-is with zero
/// variance; for missing `u`,
/// `x̂_u = μ_u + Λ_u f̂`, `V_uu = Λ_u A⁻¹ Λ_uᵀ + Ψ_u`, `V_uf = Λ_u A⁻¹`.
pub fn conditional_full_moments<T: Scalar>(
    model: &FactorModel<T>,
    case_values: &[T],
    case_mask: &[bool],
) -> Result<FullMoments<T>> {
    let fm = conditional_factor_moments(model, case_values, case_mask)?;
    let (p, m) = (model.p(), model.m());
    let v_ff = fm.covariance();
    let lambda = model.lambda();
    let mut x_hat = Array1::zeros(p);
    let mut v_xf = Array2::zeros((p, m));
    for i in 0..p {
        if case_mask[i] {
            x_hat[i] = case_values[i];
        } else {
            x_hat[i] = model.mu()[i] + lambda.row(i).dot(&fm.f_hat);
            for c in 0..m {
                v_xf[[i, c]] = lambda.row(i).dot(&v_ff.column(c));
            }
        }
    }
    let mut v_xx = Array2::zeros((p, p));
    for i in (0..p).filter(|&i| !case_mask[i]) {
        for k in (0..p).filter(|&k| !case_mask[k]) {
            v_xx[[i, k]] = v_xf.row(i).dot(&lambda.row(k));
        }
        v_xx[[i, i]] += model.psi()[i];
    }
    Ok(FullMoments { x_hat, f_hat: fm.f_hat, v_xx, v_xf, v_ff })
}
