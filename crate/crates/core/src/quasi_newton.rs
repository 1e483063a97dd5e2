//! BFGS ascent on the FIML log-likelihood.
//!
//! The search runs over `(μ, free entries of Λ, log ψ)` with the loadings
//! restricted to `λᵢⱼ = 0` for `j > i`. The objective is `−ℓ/N`; the dense
//! inverse-Hessian approximation is updated with the standard BFGS formula
//! and steps come from a backtracking Armijo line search.

use std::time::Instant;

use ndarray::{Array1, Array2};

use crate::data::ObservedDataset;
use crate::em::{relative_change, Algorithm, FitConfig, FitResult};
use crate::error::{FimlError, Result};
use crate::likelihood::{fiml_loglik_and_gradients, Gradients};
use crate::model::FactorModel;
use crate::scalar::{Scalar, PSI_FLOOR};

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

/// Free parameters as a flat vector: `μ`, the free loadings row by row, then
/// `log ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedParams<T> {
    pub values: Vec<T>,
    p: usize,
    m: usize,
    restrict: bool,
}

fn free_in_row(i: usize, m: usize, restrict: bool) -> usize {
    if restrict {
        (i + 1).min(m)
    } else {
        m
    }
}

/// Number of free parameters.
pub fn packed_len(p: usize, m: usize, restrict: bool) -> usize {
    2 * p + (0..p).map(|i| free_in_row(i, m, restrict)).sum::<usize>()
}

impl<T: Scalar> PackedParams<T> {
    pub fn from_vec(values: Vec<T>, p: usize, m: usize, restrict: bool) -> Result<Self> {
        if values.len() != packed_len(p, m, restrict) {
            return Err(FimlError::Dimension(format!(
                "expected {} packed values, got {}",
                packed_len(p, m, restrict),
                values.len()
            )));
        }
        Ok(Self { values, p, m, restrict })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn pack<T: Scalar>(model: &FactorModel<T>, restrict: bool) -> Result<PackedParams<T>> {
    let (p, m) = (model.p(), model.m());
    if restrict && !model.satisfies_restriction() {
        return Err(FimlError::InvalidModel("loadings violate the identification restriction".into()));
    }
    if model.psi().iter().any(|&v| v <= T::zero()) {
        return Err(FimlError::InvalidModel("unique variances must be positive".into()));
    }
    let mut values = Vec::with_capacity(packed_len(p, m, restrict));
    values.extend(model.mu().iter().copied());
    for i in 0..p {
        for j in 0..free_in_row(i, m, restrict) {
            values.push(model.lambda()[[i, j]]);
        }
    }
    values.extend(model.psi().iter().map(|v| v.ln()));
    Ok(PackedParams { values, p, m, restrict })
}

pub fn unpack<T: Scalar>(params: &PackedParams<T>) -> FactorModel<T> {
    let (p, m) = (params.p, params.m);
    let v = &params.values;
    let mu = Array1::from_vec(v[..p].to_vec());
    let mut lambda = Array2::zeros((p, m));
    let mut at = p;
    for i in 0..p {
        for j in 0..free_in_row(i, m, params.restrict) {
            lambda[[i, j]] = v[at];
            at += 1;
        }
    }
    let psi = Array1::from_iter(v[at..].iter().map(|x| x.exp()));
    FactorModel::from_parts(mu, lambda, psi)
}

/// Chain-rules full-model gradients into packed coordinates.
pub fn pack_gradient<T: Scalar>(params: &PackedParams<T>, grad: &Gradients<T>) -> Vec<T> {
    let (p, m) = (params.p, params.m);
    let mut out = Vec::with_capacity(params.len());
    out.extend(grad.mu.iter().copied());
    for i in 0..p {
        for j in 0..free_in_row(i, m, params.restrict) {
            out.push(grad.lambda[[i, j]]);
        }
    }
    let floor = T::lit(PSI_FLOOR);
    let at = out.len();
    for i in 0..p {
        let psi = params.values[at + i].exp();
        // below the floor the model is flat in log ψ
        out.push(if psi < floor { T::zero() } else { psi * grad.psi[i] });
    }
    out
}

/// `ℓ` and `∂ℓ/∂θ` at packed parameters.
pub fn packed_objective<T: Scalar>(params: &PackedParams<T>, data: &ObservedDataset<T>) -> Result<(T, Vec<T>)> {
    let model = unpack(params);
    let (ll, grad) = fiml_loglik_and_gradients(&model, data)?;
    Ok((ll, pack_gradient(params, &grad)))
}

/// Fits with BFGS from `config.n_starts` random starts. The identification
/// restriction is always imposed.
pub fn fit_quasi_newton<T: Scalar>(data: &ObservedDataset<T>, m: usize, config: &FitConfig) -> Result<FitResult<T>> {
    let config = FitConfig { restrict: true, ..config.clone() };
    crate::em::fit::multi_start(data, m, &config, |init| fit_quasi_newton_from(data, init, &config))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn fit_quasi_newton_from<T: Scalar>(
    data: &ObservedDataset<T>,
    init: FactorModel<T>,
    config: &FitConfig,
) -> Result<FitResult<T>> {
    config.validate()?;
    let clock = Instant::now();
    let init = if init.satisfies_restriction() { init } else { init.impose_restriction() };
    let mut x = pack(&init, true)?;
    let k = x.len();
    let n = data.n();
    let scale = T::one() / T::from_usize(n).unwrap();
    let tol = T::lit(config.tol);
    let c1 = T::lit(ARMIJO_C1);
    let shrink = T::lit(BACKTRACK);

    let (mut ll, g) = packed_objective(&x, data)?;
    if !ll.is_finite() {
        return Err(FimlError::Diverged("non-finite log-likelihood at the start".into()));
    }
    // gradient of f = −ℓ/N
    let mut gf: Vec<T> = g.iter().map(|v| -*v * scale).collect();
    let mut h = identity::<T>(k);
    let mut h_is_identity = true;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    let mut d = vec![T::zero(); k];
    let mut hy = vec![T::zero(); k];

    while iterations < config.max_iter {
        for r in 0..k {
            d[r] = -dot(&h[r * k..(r + 1) * k], &gf);
        }
        let mut slope = dot(&gf, &d);
        if !(slope < T::zero()) {
            h = identity(k);
            h_is_identity = true;
            d.iter_mut().zip(&gf).for_each(|(di, gi)| *di = -*gi);
            slope = dot(&gf, &d);
        }
        if slope == T::zero() {
            converged = true;
            break;
        }
        let f0 = -ll * scale;
        let mut alpha = T::one();
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<T> = x.values.iter().zip(&d).map(|(xi, di)| *xi + alpha * *di).collect();
            let trial = PackedParams { values: trial, ..x.clone() };
            if let Ok((ll_t, g_t)) = packed_objective(&trial, data) {
                if ll_t.is_finite() && -ll_t * scale <= f0 + c1 * alpha * slope {
                    accepted = Some((trial, ll_t, g_t));
                    break;
                }
            }
            alpha = alpha * shrink;
        }
        let Some((trial, ll_t, g_t)) = accepted else {
            if !h_is_identity {
                h = identity(k);
                h_is_identity = true;
                continue;
            }
            // no decrease possible within rounding of the objective
            if -slope * T::from_usize(n).unwrap() < tol * (ll.abs() + T::one()) {
                converged = true;
                break;
            }
            return Err(FimlError::Diverged(format!("line search failed after {iterations} iterations")));
        };
        let gf_new: Vec<T> = g_t.iter().map(|v| -*v * scale).collect();
        let s: Vec<T> = trial.values.iter().zip(&x.values).map(|(a, b)| *a - *b).collect();
        let y: Vec<T> = gf_new.iter().zip(&gf).map(|(a, b)| *a - *b).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > T::lit(1e-12) * dot(&s, &s).sqrt() * yy.sqrt() && sy > T::zero() {
            if h_is_identity {
                let gamma = sy / yy;
                h.iter_mut().for_each(|v| *v *= gamma);
                h_is_identity = false;
            }
            for r in 0..k {
                hy[r] = dot(&h[r * k..(r + 1) * k], &y);
            }
            let yhy = dot(&y, &hy);
            let rho = T::one() / sy;
            let coef = (sy + yhy) * rho * rho;
            for r in 0..k {
                let row = &mut h[r * k..(r + 1) * k];
                for c in 0..k {
                    row[c] += coef * s[r] * s[c] - rho * (hy[r] * s[c] + s[r] * hy[c]);
                }
            }
        }
        iterations += 1;
        trace.push(ll_t);
        let change = relative_change(ll_t, ll);
        x = trial;
        ll = ll_t;
        gf = gf_new;
        if change < tol {
            converged = true;
            break;
        }
    }
    let mut model = unpack(&x);
    model.apply_sign_convention();
    Ok(FitResult {
        model,
        loglik: ll,
        iterations,
        converged,
        wall_time: clock.elapsed().as_secs_f64(),
        loglik_trace: trace,
        algorithm: Algorithm::QuasiNewton,
        start: 0,
        failed_starts: Vec::new(),
    })
}

fn identity<T: Scalar>(k: usize) -> Vec<T> {
    let mut h = vec![T::zero(); k * k];
    for i in 0..k {
        h[i * k + i] = T::one();
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn model() -> FactorModel<f64> {
        FactorModel::new(
            array![0.1, 0.2, 0.3, 0.4],
            array![[0.5, 0.0], [0.3, 0.6], [-0.2, 0.4], [0.7, -0.1]],
            array![0.3, 0.4, 0.5, 0.6],
        )
        .unwrap()
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let m = model();
        let packed = pack(&m, true).unwrap();
        assert_eq!(packed.len(), packed_len(4, 2, true));
        assert_eq!(packed.len(), 4 + (4 * 2 - 1) + 4);
        let back = unpack(&packed);
        assert!(back.max_abs_diff(&m) < 1e-15);
        assert!(back.satisfies_restriction());
    }

    #[test]
    fn pack_rejects_restriction_violation() {
        let mut lam = model().lambda().clone();
        lam[[0, 1]] = 0.2;
        let m = FactorModel::new(model().mu().clone(), lam, model().psi().clone()).unwrap();
        assert!(pack(&m, true).is_err());
        assert!(pack(&m, false).is_ok());
    }
}
