//! The factor model `x = μ + Λ f + ε` and the covariance it implies.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::scalar::{Scalar, PSI_FLOOR};

/// Mean vector, loading matrix and unique variances of a factor model.
///
/// Unique variances never drop below [`PSI_FLOOR`]; the constructors clamp
/// them and reject non-finite input.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    mu: Array1<T>,
    lambda: Array2<T>,
    psi: Array1<T>,
}

impl<T: Scalar> FactorModel<T> {
    pub fn new(mu: Array1<T>, lambda: Array2<T>, psi: Array1<T>) -> Result<Self> {
        let p = mu.len();
        if lambda.nrows() != p || psi.len() != p {
            return Err(FimlError::Dimension(format!(
                "mu has {} entries, lambda is {}x{}, psi has {}",
                p,
                lambda.nrows(),
                lambda.ncols(),
                psi.len()
            )));
        }
        if p == 0 || lambda.ncols() == 0 {
            return Err(FimlError::InvalidModel("need p >= 1 and m >= 1".into()));
        }
        if mu.iter().chain(lambda.iter()).chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(FimlError::InvalidModel("non-finite parameter".into()));
        }
        if psi.iter().any(|&v| v <= T::zero()) {
            return Err(FimlError::InvalidModel("unique variances must be positive".into()));
        }
        let floor = T::lit(PSI_FLOOR);
        let psi = psi.mapv(|v| v.max(floor));
        Ok(Self { mu, lambda, psi })
    }

    /// Builds a model from unchecked parts, clamping `psi` to the floor.
    pub(crate) fn from_parts(mu: Array1<T>, lambda: Array2<T>, mut psi: Array1<T>) -> Self {
        let floor = T::lit(PSI_FLOOR);
        psi.mapv_inplace(|v| if v.is_nan() { floor } else { v.max(floor) });
        Self { mu, lambda, psi }
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }

    pub fn m(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn mu(&self) -> &Array1<T> {
        &self.mu
    }

    pub fn lambda(&self) -> &Array2<T> {
        &self.lambda
    }

    pub fn psi(&self) -> &Array1<T> {
        &self.psi
    }

    pub fn into_parts(self) -> (Array1<T>, Array2<T>, Array1<T>) {
        (self.mu, self.lambda, self.psi)
    }

    /// `Σ = ΛΛᵀ + Ψ`.
    pub fn implied_covariance(&self) -> Array2<T> {
        let mut sigma = self.lambda.dot(&self.lambda.t());
        for i in 0..self.p() {
            sigma[[i, i]] += self.psi[i];
        }
        sigma
    }

    /// Parameters of the variables marked observed in `mask_row`, in order.
    pub fn restrict_observed(&self, mask_row: &[bool]) -> Result<(Array1<T>, Array2<T>, Array1<T>)> {
        if mask_row.len() != self.p() {
            return Err(FimlError::Dimension(format!(
                "mask has {} entries for {} variables",
                mask_row.len(),
                self.p()
            )));
        }
        let idx: Vec<usize> = (0..self.p()).filter(|&i| mask_row[i]).collect();
        if idx.is_empty() {
            return Err(FimlError::EmptyObservation);
        }
        Ok((
            self.mu.select(Axis(0), &idx),
            self.lambda.select(Axis(0), &idx),
            self.psi.select(Axis(0), &idx),
        ))
    }

    /// True when `λᵢⱼ = 0` for every `j > i`.
    pub fn satisfies_restriction(&self) -> bool {
        let m = self.m();
        (0..m.min(self.p())).all(|i| ((i + 1)..m).all(|j| self.lambda[[i, j]] == T::zero()))
    }

    /// Rotates `Λ` by an orthogonal matrix so its leading `m x m` block is
    /// lower triangular with a non-negative diagonal. The implied covariance,
    /// and hence the likelihood, is unchanged.
    pub fn impose_restriction(&self) -> Self {
        let mut lambda = self.lambda.clone();
        let m = self.m();
        let p = self.p();
        for i in 0..m.min(p) {
            for j in (i + 1)..m {
                let a = lambda[[i, i]];
                let b = lambda[[i, j]];
                if b == T::zero() {
                    continue;
                }
                let r = a.hypot(b);
                let (c, s) = (a / r, b / r);
                for row in 0..p {
                    let x = lambda[[row, i]];
                    let y = lambda[[row, j]];
                    lambda[[row, i]] = c * x + s * y;
                    lambda[[row, j]] = -s * x + c * y;
                }
                lambda[[i, j]] = T::zero();
            }
        }
        let mut out = Self { mu: self.mu.clone(), lambda, psi: self.psi.clone() };
        out.apply_sign_convention();
        out
    }

    /// Flips column signs so that `λᵢᵢ ≥ 0` for `i < m`.
    pub fn apply_sign_convention(&mut self) {
        let m = self.m();
        for j in 0..m.min(self.p()) {
            if self.lambda[[j, j]] < T::zero() {
                self.lambda.column_mut(j).mapv_inplace(|v| -v);
            }
        }
    }

    /// Starting values: observed means, uniform(−0.5, 0.5) loadings and half
    /// the observed variances.
    pub fn initial<R: Rng + ?Sized>(
        data: &ObservedDataset<T>,
        m: usize,
        restrict: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 {
            return Err(FimlError::InvalidModel("need at least one factor".into()));
        }
        let p = data.p();
        let (mean, var) = data.observed_moments()?;
        let mut lambda = Array2::from_shape_fn((p, m), |_| T::lit(rng.gen_range(-0.5..0.5)));
        let half = T::lit(0.5);
        let psi = var.mapv(|v| v * half);
        if restrict {
            for i in 0..m.min(p) {
                for j in (i + 1)..m {
                    lambda[[i, j]] = T::zero();
                }
            }
        }
        Ok(Self::from_parts(mean, lambda, psi))
    }

    /// Largest absolute difference between corresponding parameters.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        fn md<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
            a.iter().zip(b.iter()).fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()))
        }
        let lam = self
            .lambda
            .iter()
            .zip(other.lambda.iter())
            .fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()));
        md(self.mu.view(), other.mu.view())
            .max(md(self.psi.view(), other.psi.view()))
            .max(lam)
    }

    pub fn cast<U: Scalar>(&self) -> FactorModel<U> {
        let c = |v: &T| U::lit(v.to_f64_lossy());
        FactorModel::from_parts(self.mu.map(c), self.lambda.map(c), self.psi.map(c))
    }
}
