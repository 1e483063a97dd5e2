//! Observed-data (FIML) log-likelihood and its analytic gradients.
//!
//! Every per-case quantity is computed in the `m`-dimensional factor space:
//! for the observed block `o` of a case,
//!
//! ```text
//! A     = I + Λ_oᵀ Ψ_o⁻¹ Λ_o
//! Σ_o⁻¹ = Ψ_o⁻¹ − Ψ_o⁻¹ Λ_o A⁻¹ Λ_oᵀ Ψ_o⁻¹
//! |Σ_o| = |Ψ_o| · |A|
//! ```
//!
//! `A` depends only on the missingness pattern, so it is factored once per
//! pattern. When most variables are observed it is obtained from the full
//! `M = I + ΛᵀΨ⁻¹Λ` by subtracting the missing rows instead.

use ndarray::{Array1, Array2};

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::linalg::{backward_solve, chol_inverse, chol_logdet, cholesky, forward_solve};
use crate::model::FactorModel;
use crate::scalar::{Scalar, LN_2PI};

/// `Ψ⁻¹`, `Ψ⁻¹Λ` and `M = ΛᵀΨ⁻¹Λ + I` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PrecisionBlocks<T> {
    pub psi_inv: Array1<T>,
    pub ln_psi: Array1<T>,
    pub psi_inv_lambda: Array2<T>,
    pub m_mat: Array2<T>,
    pub m_chol: Array2<T>,
}

/// Builds the joint-precision blocks of `model`.
pub fn precision_blocks<T: Scalar>(model: &FactorModel<T>) -> Result<PrecisionBlocks<T>> {
    let (p, m) = (model.p(), model.m());
    let psi = model.psi();
    let lambda = model.lambda();
    let psi_inv = psi.mapv(|v| T::one() / v);
    let ln_psi = psi.mapv(|v| v.ln());
    let mut psi_inv_lambda = lambda.clone();
    for i in 0..p {
        let s = psi_inv[i];
        psi_inv_lambda.row_mut(i).mapv_inplace(|v| v * s);
    }
    let mut m_mat = lambda.t().dot(&psi_inv_lambda);
    for j in 0..m {
        m_mat[[j, j]] += T::one();
    }
    let mut chol = m_mat.as_standard_layout().to_owned();
    cholesky(chol.as_slice_mut().unwrap(), m).map_err(|_| FimlError::NotPositiveDefinite("M"))?;
    Ok(PrecisionBlocks { psi_inv, ln_psi, psi_inv_lambda, m_mat, m_chol: chol })
}

/// Per-pattern factorization, reused across the cases of the pattern.
pub(crate) struct PatternFactor<T> {
    pub m: usize,
    pub k: usize,
    /// Cholesky factor of `A`, `m x m`.
    pub chol: Vec<T>,
    /// `A⁻¹`, filled by [`PatternFactor::fill_inverse`].
    pub a_inv: Vec<T>,
    /// `log |Σ_o|`.
    pub logdet: T,
    pub mu: Vec<T>,
    pub lam: Vec<T>,
    pub w: Vec<T>,
    pub psi_inv: Vec<T>,
}

impl<T: Scalar> PatternFactor<T> {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            k: 0,
            chol: vec![T::zero(); m * m],
            a_inv: vec![T::zero(); m * m],
            logdet: T::zero(),
            mu: Vec::new(),
            lam: Vec::new(),
            w: Vec::new(),
            psi_inv: Vec::new(),
        }
    }

    pub fn factor(
        &mut self,
        model: &FactorModel<T>,
        blocks: &PrecisionBlocks<T>,
        mask: &[bool],
        observed: &[usize],
    ) -> Result<()> {
        let m = self.m;
        let k = observed.len();
        let p = model.p();
        self.k = k;
        self.mu.clear();
        self.lam.clear();
        self.w.clear();
        self.psi_inv.clear();
        let lambda = model.lambda();
        let mu = model.mu();
        let mut ln_psi = T::zero();
        for &i in observed {
            self.mu.push(mu[i]);
            self.psi_inv.push(blocks.psi_inv[i]);
            ln_psi += blocks.ln_psi[i];
            for j in 0..m {
                self.lam.push(lambda[[i, j]]);
                self.w.push(blocks.psi_inv_lambda[[i, j]]);
            }
        }
        let a = &mut self.chol;
        if 2 * k > p {
            // complement form: A = M − Λ_uᵀ Ψ_u⁻¹ Λ_u
            a.copy_from_slice(blocks.m_mat.as_slice().unwrap());
            for i in (0..p).filter(|&i| !mask[i]) {
                for r in 0..m {
                    let lr = lambda[[i, r]];
                    for c in 0..=r {
                        a[r * m + c] -= lr * blocks.psi_inv_lambda[[i, c]];
                    }
                }
            }
        } else {
            for r in 0..m {
                for c in 0..=r {
                    a[r * m + c] = if r == c { T::one() } else { T::zero() };
                }
            }
            for row in 0..k {
                let l = &self.lam[row * m..(row + 1) * m];
                let w = &self.w[row * m..(row + 1) * m];
                for r in 0..m {
                    let lr = l[r];
                    for c in 0..=r {
                        a[r * m + c] += lr * w[c];
                    }
                }
            }
        }
        for r in 0..m {
            for c in 0..r {
                a[c * m + r] = a[r * m + c];
            }
        }
        cholesky(a, m).map_err(|_| FimlError::NotPositiveDefinite("I + ΛᵀΨ⁻¹Λ on observed block"))?;
        self.logdet = ln_psi + chol_logdet(a, m);
        Ok(())
    }

    pub fn fill_inverse(&mut self) {
        chol_inverse(&self.chol, self.m, &mut self.a_inv);
    }

    /// Centers `x` into `r`, writes the posterior factor mean into `f` and
    /// returns the Mahalanobis term `rᵀ Σ_o⁻¹ r`.
    #[inline]
    pub fn case(&self, x: &[T], r: &mut [T], f: &mut [T]) -> T {
        let m = self.m;
        let mut e = T::zero();
        f.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..self.k {
            let rj = x[j] - self.mu[j];
            r[j] = rj;
            e += rj * rj * self.psi_inv[j];
            let w = &self.w[j * m..(j + 1) * m];
            for c in 0..m {
                f[c] += w[c] * rj;
            }
        }
        forward_solve(&self.chol, m, f);
        let uu: T = f.iter().map(|v| *v * *v).sum();
        backward_solve(&self.chol, m, f);
        e - uu
    }
}

/// Scratch buffers for one case.
pub(crate) struct CaseScratch<T> {
    pub r: Vec<T>,
    pub f: Vec<T>,
}

impl<T: Scalar> CaseScratch<T> {
    pub fn new(p: usize, m: usize) -> Self {
        Self { r: vec![T::zero(); p], f: vec![T::zero(); m] }
    }
}

pub(crate) fn check_dims<T: Scalar>(model: &FactorModel<T>, data: &ObservedDataset<T>) -> Result<()> {
    if model.p() != data.p() {
        return Err(FimlError::Dimension(format!(
            "model has {} variables, data has {}",
            model.p(),
            data.p()
        )));
    }
    Ok(())
}

/// `ℓ(μ, Λ, Ψ) = −½ Σₙ { cₙ log 2π + log|Σ_[n]| + r_[n]ᵀ Σ_[n]⁻¹ r_[n] }`, with
/// `cₙ` the number of variables observed in case `n`.
pub fn fiml_loglik<T: Scalar>(model: &FactorModel<T>, data: &ObservedDataset<T>) -> Result<T> {
    check_dims(model, data)?;
    let blocks = precision_blocks(model)?;
    let m = model.m();
    let total = data.reduce_batches(
        || (T::zero(), PatternFactor::new(m), CaseScratch::new(data.p(), m)),
        |(acc, pf, sc), pat, range| {
            pf.factor(model, &blocks, pat.mask(), pat.observed())?;
            let k = pat.observed().len();
            let konst = T::from_usize(k).unwrap() * T::lit(LN_2PI) + pf.logdet;
            for pos in range {
                let q = pf.case(pat.case_values(pos), &mut sc.r[..k], &mut sc.f);
                *acc += konst + q;
            }
            Ok(())
        },
        |acc, part| acc.0 += part.0,
    )?;
    Ok(T::lit(-0.5) * total.0)
}

/// Gradients of [`fiml_loglik`] with respect to `μ`, `Λ` and the diagonal of `Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub mu: Array1<T>,
    pub lambda: Array2<T>,
    pub psi: Array1<T>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros(p: usize, m: usize) -> Self {
        Self { mu: Array1::zeros(p), lambda: Array2::zeros((p, m)), psi: Array1::zeros(p) }
    }

    fn add(&mut self, other: &Self) {
        self.mu += &other.mu;
        self.lambda += &other.lambda;
        self.psi += &other.psi;
    }

    /// Largest absolute entry across the three blocks.
    pub fn max_abs(&self) -> T {
        self.mu
            .iter()
            .chain(self.lambda.iter())
            .chain(self.psi.iter())
            .fold(T::zero(), |a, v| a.max(v.abs()))
    }

    /// Euclidean norm over all entries, skipping loadings fixed by the
    /// identification restriction when `restricted` is set.
    pub fn norm(&self, restricted: bool) -> T {
        let m = self.lambda.ncols();
        let mut s = self.mu.iter().chain(self.psi.iter()).map(|v| *v * *v).sum::<T>();
        for ((i, j), v) in self.lambda.indexed_iter() {
            if !(restricted && j > i) || i >= m {
                s += *v * *v;
            }
        }
        s.sqrt()
    }
}

/// Log-likelihood and gradients in one pass.
///
/// Per case with `s = Σ_o⁻¹ r`:
/// `∂ℓ/∂μ_o += s`, `∂ℓ/∂Λ_o += s sᵀΛ_o − Σ_o⁻¹Λ_o`,
/// `∂ℓ/∂ψ_o += ½ (s² − diag Σ_o⁻¹)`, using `Σ_o⁻¹Λ_o = Ψ_o⁻¹Λ_o A⁻¹`.
pub fn fiml_loglik_and_gradients<T: Scalar>(
    model: &FactorModel<T>,
    data: &ObservedDataset<T>,
) -> Result<(T, Gradients<T>)> {
    check_dims(model, data)?;
    let blocks = precision_blocks(model)?;
    let (p, m) = (model.p(), model.m());
    let half = T::lit(0.5);
    let (total, grad, ..) = data.reduce_batches(
        || (T::zero(), Gradients::zeros(p, m), PatternFactor::new(m), CaseScratch::new(p, m), vec![T::zero(); m]),
        |(ll, g, pf, sc, t), pat, range| {
            pf.factor(model, &blocks, pat.mask(), pat.observed())?;
            pf.fill_inverse();
            let obs = pat.observed();
            let k = obs.len();
            let count = T::from_usize(range.len()).unwrap();
            let konst = T::from_usize(k).unwrap() * T::lit(LN_2PI) + pf.logdet;
            // pattern-level terms: −c·Ψ⁻¹ΛA⁻¹ and −½c·diag Σ_o⁻¹
            for (row, &i) in obs.iter().enumerate() {
                let w = &pf.w[row * m..(row + 1) * m];
                let mut diag = T::zero();
                for c in 0..m {
                    let mut wa = T::zero();
                    for d in 0..m {
                        wa += w[d] * pf.a_inv[d * m + c];
                    }
                    g.lambda[[i, c]] -= count * wa;
                    diag += wa * w[c];
                }
                g.psi[i] -= half * count * (pf.psi_inv[row] - diag);
            }
            for pos in range {
                let q = pf.case(pat.case_values(pos), &mut sc.r[..k], &mut sc.f);
                *ll += konst + q;
                t.iter_mut().for_each(|v| *v = T::zero());
                for (row, &i) in obs.iter().enumerate() {
                    let w = &pf.w[row * m..(row + 1) * m];
                    let mut s = sc.r[row] * pf.psi_inv[row];
                    for c in 0..m {
                        s -= w[c] * sc.f[c];
                    }
                    sc.r[row] = s;
                    g.mu[i] += s;
                    g.psi[i] += half * s * s;
                    let l = &pf.lam[row * m..(row + 1) * m];
                    for c in 0..m {
                        t[c] += l[c] * s;
                    }
                }
                for (row, &i) in obs.iter().enumerate() {
                    let s = sc.r[row];
                    for c in 0..m {
                        g.lambda[[i, c]] += s * t[c];
                    }
                }
            }
            Ok(())
        },
        |acc, part| {
            acc.0 += part.0;
            acc.1.add(&part.1);
        },
    )?;
    Ok((T::lit(-0.5) * total, grad))
}

pub fn fiml_gradients<T: Scalar>(model: &FactorModel<T>, data: &ObservedDataset<T>) -> Result<Gradients<T>> {
    fiml_loglik_and_gradients(model, data).map(|(_, g)| g)
}
