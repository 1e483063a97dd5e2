//! EM with both the factors and the missing values in the complete data.

use ndarray::{Array1, Array2};

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::likelihood::{check_dims, precision_blocks, CaseScratch, PatternFactor};
use crate::linalg::cholesky;
use crate::model::FactorModel;
use crate::scalar::{Scalar, LN_2PI};

use super::solve_row;

/// Expected complete-data sufficient statistics, with `f* = (1, fᵀ)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats<T> {
    /// `Σ E[x xᵀ]`, `p x p`.
    pub s_xx: Array2<T>,
    /// `Σ E[f* xᵀ]`, `(m + 1) x p`.
    pub s_fsx: Array2<T>,
    /// `Σ E[f* f*ᵀ]`, `(m + 1) x (m + 1)`.
    pub s_fsfs: Array2<T>,
}

struct Acc<T> {
    ll: T,
    // upper triangle only until finished
    s_xx: Vec<T>,
    s_fsx: Vec<T>,
    s_fsfs: Vec<T>,
    pf: PatternFactor<T>,
    sc: CaseScratch<T>,
    x_hat: Vec<T>,
    missing: Vec<usize>,
    lam_ainv: Vec<T>,
}

impl<T: Scalar> Acc<T> {
    fn new(p: usize, m: usize) -> Self {
        let d = m + 1;
        Self {
            ll: T::zero(),
            s_xx: vec![T::zero(); p * p],
            s_fsx: vec![T::zero(); d * p],
            s_fsfs: vec![T::zero(); d * d],
            pf: PatternFactor::new(m),
            sc: CaseScratch::new(p, m),
            x_hat: vec![T::zero(); p],
            missing: Vec::with_capacity(p),
            lam_ainv: Vec::with_capacity(p * m),
        }
    }

    fn merge(&mut self, other: Self) {
        self.ll += other.ll;
        for (a, b) in self.s_xx.iter_mut().zip(other.s_xx) {
            *a += b;
        }
        for (a, b) in self.s_fsx.iter_mut().zip(other.s_fsx) {
            *a += b;
        }
        for (a, b) in self.s_fsfs.iter_mut().zip(other.s_fsfs) {
            *a += b;
        }
    }
}

/// E-step of the ordinary algorithm together with `ℓ` at `model`.
pub(crate) fn estep_ordinary_with_loglik<T: Scalar>(
    model: &FactorModel<T>,
    data: &ObservedDataset<T>,
) -> Result<(SufficientStats<T>, T)> {
    check_dims(model, data)?;
    let blocks = precision_blocks(model)?;
    let (p, m) = (model.p(), model.m());
    let d = m + 1;
    let lam_owned = model.lambda().as_standard_layout().into_owned();
    let lambda = lam_owned.as_slice().unwrap();
    let psi = model.psi();
    let mu = model.mu();
    let acc = data.reduce_batches(
        || Acc::new(p, m),
        |acc, pat, range| {
            let Acc { ll, s_xx, s_fsx, s_fsfs, pf, sc, x_hat, missing, lam_ainv } = acc;
            pf.factor(model, &blocks, pat.mask(), pat.observed())?;
            pf.fill_inverse();
            let obs = pat.observed();
            let k = obs.len();
            let count = T::from_usize(range.len()).unwrap();
            missing.clear();
            missing.extend((0..p).filter(|&i| !pat.mask()[i]));
            // Λ_u A⁻¹
            lam_ainv.clear();
            for &i in missing.iter() {
                let li = &lambda[i * m..(i + 1) * m];
                for c in 0..m {
                    let mut v = T::zero();
                    for e in 0..m {
                        v += li[e] * pf.a_inv[e * m + c];
                    }
                    lam_ainv.push(v);
                }
            }
            // pattern-level conditional covariances, weighted by the case count
            for (a, &i) in missing.iter().enumerate() {
                let la = &lam_ainv[a * m..(a + 1) * m];
                for &j in missing[a..].iter() {
                    let lj = &lambda[j * m..(j + 1) * m];
                    let mut v = T::zero();
                    for c in 0..m {
                        v += la[c] * lj[c];
                    }
                    if i == j {
                        v += psi[i];
                    }
                    s_xx[i * p + j] += count * v;
                }
                for c in 0..m {
                    s_fsx[(1 + c) * p + i] += count * la[c];
                }
            }
            s_fsfs[0] += count;
            for r in 0..m {
                for c in 0..m {
                    s_fsfs[(1 + r) * d + 1 + c] += count * pf.a_inv[r * m + c];
                }
            }
            let konst = T::from_usize(k).unwrap() * T::lit(LN_2PI) + pf.logdet;
            for pos in range {
                let xo = pat.case_values(pos);
                let q = pf.case(xo, &mut sc.r[..k], &mut sc.f);
                *ll += konst + q;
                let f = &sc.f;
                for (j, &i) in obs.iter().enumerate() {
                    x_hat[i] = xo[j];
                }
                for &i in missing.iter() {
                    let mut v = mu[i];
                    for c in 0..m {
                        v += lambda[i * m + c] * f[c];
                    }
                    x_hat[i] = v;
                }
                for i in 0..p {
                    let xi = x_hat[i];
                    let row = &mut s_xx[i * p + i..(i + 1) * p];
                    for (dst, &xj) in row.iter_mut().zip(&x_hat[i..]) {
                        *dst += xi * xj;
                    }
                }
                for i in 0..p {
                    s_fsx[i] += x_hat[i];
                }
                for c in 0..m {
                    let fc = f[c];
                    let row = &mut s_fsx[(1 + c) * p..(2 + c) * p];
                    for (dst, &xi) in row.iter_mut().zip(x_hat.iter()) {
                        *dst += fc * xi;
                    }
                    s_fsfs[1 + c] += fc;
                    s_fsfs[(1 + c) * d] += fc;
                    for e in 0..m {
                        s_fsfs[(1 + c) * d + 1 + e] += fc * f[e];
                    }
                }
            }
            Ok(())
        },
        |a, b| a.merge(b),
    )?;
    let mut s_xx = Array2::from_shape_vec((p, p), acc.s_xx).unwrap();
    for i in 0..p {
        for j in 0..i {
            s_xx[[i, j]] = s_xx[[j, i]];
        }
    }
    let stats = SufficientStats {
        s_xx,
        s_fsx: Array2::from_shape_vec((d, p), acc.s_fsx).unwrap(),
        s_fsfs: Array2::from_shape_vec((d, d), acc.s_fsfs).unwrap(),
    };
    Ok((stats, T::lit(-0.5) * acc.ll))
}

/// Expected sufficient statistics under `model` given the observed data.
pub fn estep_ordinary<T: Scalar>(model: &FactorModel<T>, data: &ObservedDataset<T>) -> Result<SufficientStats<T>> {
    estep_ordinary_with_loglik(model, data).map(|(s, _)| s)
}

/// Closed-form maximizer of the expected complete-data log-likelihood:
/// `(μ, Λ) = Ŝ_{f*x}ᵀ Ŝ_{f*f*}⁻¹` and
/// `Ψ = diag[Ŝxx − 2(μ,Λ)Ŝ_{f*x} + (μ,Λ)Ŝ_{f*f*}(μ,Λ)ᵀ] / N`.
///
/// With `restrict`, rows `i < m` are solved over their free coefficients
/// only, which is the exact constrained maximizer.
pub fn mstep_ordinary<T: Scalar>(stats: &SufficientStats<T>, n: usize, restrict: bool) -> Result<FactorModel<T>> {
    let d = stats.s_fsfs.nrows();
    let p = stats.s_xx.nrows();
    if d < 2 || stats.s_fsx.dim() != (d, p) || stats.s_fsfs.ncols() != d || n == 0 {
        return Err(FimlError::Dimension("inconsistent sufficient statistics".into()));
    }
    let m = d - 1;
    let gram = stats.s_fsfs.as_standard_layout().to_owned();
    let gram = gram.as_slice().unwrap();
    let mut check = gram.to_vec();
    cholesky(&mut check, d).map_err(|_| FimlError::DegenerateMoments)?;
    let nn = T::from_usize(n).unwrap();
    let mut mu = Array1::zeros(p);
    let mut lambda = Array2::zeros((p, m));
    let mut psi = Array1::zeros(p);
    let mut resp = vec![T::zero(); d];
    for i in 0..p {
        for r in 0..d {
            resp[r] = stats.s_fsx[[r, i]];
        }
        let free = if restrict && i < m { i + 2 } else { d };
        let (beta, resid) = solve_row(gram, d, &resp, stats.s_xx[[i, i]], free).ok_or(FimlError::DegenerateMoments)?;
        mu[i] = beta[0];
        for c in 0..m {
            lambda[[i, c]] = beta[1 + c];
        }
        psi[i] = resid / nn;
    }
    Ok(FactorModel::from_parts(mu, lambda, psi))
}
