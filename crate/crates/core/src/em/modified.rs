//! EM with only the common factors in the complete data.
//!
//! The E-step needs `f̂ₙ` and `E[fₙfₙᵀ]` for each case, computed from the
//! observed block alone. The M-step separates by variable: for variable `i`
//! over the cases that observe it, with `zₙ = (1, f̂ₙᵀ)ᵀ`,
//!
//! ```text
//! Gᵢ = Σ E[zₙzₙᵀ],  hᵢ = Σ xₙᵢ zₙ,  sᵢ = Σ xₙᵢ²
//! (μᵢ, λᵢ) = Gᵢ⁻¹ hᵢ
//! ψᵢ = (sᵢ − 2 βᵢᵀhᵢ + βᵢᵀGᵢβᵢ) / #nobs(i)
//! ```

use ndarray::{Array1, Array2};

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::likelihood::{check_dims, precision_blocks, CaseScratch, PatternFactor};
use crate::model::FactorModel;
use crate::scalar::{Scalar, LN_2PI};

use super::moments::FactorMoments;
use super::solve_row;

/// Per-variable accumulators of the modified M-step.
#[derive(Debug, Clone)]
pub(crate) struct ModifiedStats<T> {
    p: usize,
    m: usize,
    gram: Vec<T>,
    resp: Vec<T>,
    sq: Vec<T>,
    count: Vec<usize>,
}

impl<T: Scalar> ModifiedStats<T> {
    fn new(p: usize, m: usize) -> Self {
        let d = m + 1;
        Self {
            p,
            m,
            gram: vec![T::zero(); p * d * d],
            resp: vec![T::zero(); p * d],
            sq: vec![T::zero(); p],
            count: vec![0; p],
        }
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += *b;
        }
        for (a, b) in self.resp.iter_mut().zip(&other.resp) {
            *a += *b;
        }
        for (a, b) in self.sq.iter_mut().zip(&other.sq) {
            *a += *b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += *b;
        }
    }

    /// Adds `Zsum` to the Gram matrix of every variable in `obs`.
    fn add_gram(&mut self, obs: &[usize], zsum: &[T], cases: usize) {
        let dd = (self.m + 1) * (self.m + 1);
        for &i in obs {
            let g = &mut self.gram[i * dd..(i + 1) * dd];
            for (a, b) in g.iter_mut().zip(zsum) {
                *a += *b;
            }
            self.count[i] += cases;
        }
    }

    #[inline]
    fn add_case(&mut self, obs: &[usize], x: &[T], f: &[T]) {
        let d = self.m + 1;
        for (j, &i) in obs.iter().enumerate() {
            let xi = x[j];
            let h = &mut self.resp[i * d..(i + 1) * d];
            h[0] += xi;
            for c in 0..self.m {
                h[1 + c] += xi * f[c];
            }
            self.sq[i] += xi * xi;
        }
    }

    pub fn mstep(&self, restrict: bool) -> Result<FactorModel<T>> {
        let (p, m) = (self.p, self.m);
        let d = m + 1;
        let mut mu = Array1::zeros(p);
        let mut lambda = Array2::zeros((p, m));
        let mut psi = Array1::zeros(p);
        for i in 0..p {
            if self.count[i] == 0 {
                return Err(FimlError::UnobservedVariable(i));
            }
            let free = if restrict && i < m { i + 2 } else { d };
            let g = &self.gram[i * d * d..(i + 1) * d * d];
            let h = &self.resp[i * d..(i + 1) * d];
            let (beta, resid) = solve_row(g, d, h, self.sq[i], free).ok_or(FimlError::SingularVariable(i))?;
            mu[i] = beta[0];
            for c in 0..m {
                lambda[[i, c]] = beta[1 + c];
            }
            psi[i] = resid / T::from_usize(self.count[i]).unwrap();
        }
        Ok(FactorModel::from_parts(mu, lambda, psi))
    }
}

/// `Σ E[z zᵀ]` over a run of cases with the same `A⁻¹`.
struct ZSum<T> {
    d: usize,
    z: Vec<T>,
}

impl<T: Scalar> ZSum<T> {
    fn reset(&mut self, cases: usize, a_inv: &[T]) {
        let (d, m) = (self.d, self.d - 1);
        let c = T::from_usize(cases).unwrap();
        self.z.iter_mut().for_each(|v| *v = T::zero());
        self.z[0] = c;
        for r in 0..m {
            for k in 0..m {
                self.z[(1 + r) * d + 1 + k] = c * a_inv[r * m + k];
            }
        }
    }

    #[inline]
    fn add(&mut self, f: &[T]) {
        let d = self.d;
        for r in 0..d - 1 {
            let fr = f[r];
            self.z[1 + r] += fr;
            self.z[(1 + r) * d] += fr;
            for k in 0..d - 1 {
                self.z[(1 + r) * d + 1 + k] += fr * f[k];
            }
        }
    }
}

/// Fused E-step: per-variable accumulators and `ℓ` at `model`.
pub(crate) fn modified_stats<T: Scalar>(
    model: &FactorModel<T>,
    data: &ObservedDataset<T>,
) -> Result<(ModifiedStats<T>, T)> {
    check_dims(model, data)?;
    let blocks = precision_blocks(model)?;
    let (p, m) = (model.p(), model.m());
    let d = m + 1;
    let (stats, ll, ..) = data.reduce_batches(
        || {
            (
                ModifiedStats::new(p, m),
                T::zero(),
                PatternFactor::new(m),
                CaseScratch::new(p, m),
                ZSum { d, z: vec![T::zero(); d * d] },
            )
        },
        |(st, ll, pf, sc, zs), pat, range| {
            pf.factor(model, &blocks, pat.mask(), pat.observed())?;
            pf.fill_inverse();
            let obs = pat.observed();
            let k = obs.len();
            let konst = T::from_usize(k).unwrap() * T::lit(LN_2PI) + pf.logdet;
            zs.reset(range.len(), &pf.a_inv);
            let cases = range.len();
            for pos in range {
                let x = pat.case_values(pos);
                let q = pf.case(x, &mut sc.r[..k], &mut sc.f);
                *ll += konst + q;
                zs.add(&sc.f);
                st.add_case(obs, x, &sc.f);
            }
            st.add_gram(obs, &zs.z, cases);
            Ok(())
        },
        |a, b| {
            a.0.merge(&b.0);
            a.1 += b.1;
        },
    )?;
    Ok((stats, T::lit(-0.5) * ll))
}

/// Factor moments of every case, in case order.
pub fn estep_modified<T: Scalar>(model: &FactorModel<T>, data: &ObservedDataset<T>) -> Result<Vec<FactorMoments<T>>> {
    check_dims(model, data)?;
    let blocks = precision_blocks(model)?;
    let (p, m) = (model.p(), model.m());
    let mut out: Vec<Option<FactorMoments<T>>> = vec![None; data.n()];
    let mut pf = PatternFactor::new(m);
    let mut sc = CaseScratch::new(p, m);
    for pat in data.patterns() {
        pf.factor(model, &blocks, pat.mask(), pat.observed())?;
        pf.fill_inverse();
        let k = pat.observed().len();
        for (pos, &case) in pat.cases().iter().enumerate() {
            pf.case(pat.case_values(pos), &mut sc.r[..k], &mut sc.f);
            let f_hat = Array1::from_vec(sc.f.clone());
            let ff_hat = Array2::from_shape_fn((m, m), |(i, j)| f_hat[i] * f_hat[j] + pf.a_inv[i * m + j]);
            out[case] = Some(FactorMoments { f_hat, ff_hat });
        }
    }
    Ok(out.into_iter().map(|o| o.expect("patterns partition the cases")).collect())
}

/// Per-variable M-step from a stream of factor moments (one per case).
pub fn mstep_modified<T: Scalar>(
    moments: &[FactorMoments<T>],
    data: &ObservedDataset<T>,
    m: usize,
    restrict: bool,
) -> Result<FactorModel<T>> {
    if moments.is_empty() {
        return Err(FimlError::EmptyDataset);
    }
    if moments.len() != data.n() || moments.iter().any(|fm| fm.f_hat.len() != m) {
        return Err(FimlError::Dimension("moments do not match the data".into()));
    }
    let p = data.p();
    let d = m + 1;
    let mut st = ModifiedStats::new(p, m);
    let mut z = vec![T::zero(); d * d];
    for pat in data.patterns() {
        let obs = pat.observed();
        for (pos, &case) in pat.cases().iter().enumerate() {
            let fm = &moments[case];
            let f = fm.f_hat.as_slice().unwrap();
            z[0] = T::one();
            for r in 0..m {
                z[1 + r] = f[r];
                z[(1 + r) * d] = f[r];
                for c in 0..m {
                    z[(1 + r) * d + 1 + c] = fm.ff_hat[[r, c]];
                }
            }
            st.add_gram(obs, &z, 1);
            st.add_case(obs, pat.case_values(pos), f);
        }
    }
    st.mstep(restrict)
}
