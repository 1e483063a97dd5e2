//! Varimax and promax rotation of a loading matrix.
//!
//! Rotated results are reported as `loadings = Λ T`. For an oblique rotation
//! the factor correlations are `Φ = (TᵀT)⁻¹`, so `loadings · Φ · loadingsᵀ`
//! equals `ΛΛᵀ`. Columns are ordered by decreasing sum of squared loadings and
//! each column is signed so its largest-magnitude entry is positive.

use ndarray::{Array1, Array2, Axis};

use crate::error::{FimlError, Result};
use crate::linalg::{chol_inverse, cholesky};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationResult<T> {
    pub loadings: Array2<T>,
    pub transform: Array2<T>,
    pub factor_correlations: Array2<T>,
}

/// Raw varimax criterion: the summed column variances of squared loadings.
pub fn varimax_criterion<T: Scalar>(loadings: &Array2<T>) -> T {
    let p = T::from_usize(loadings.nrows()).unwrap();
    loadings
        .axis_iter(Axis(1))
        .map(|col| {
            let sq: Vec<T> = col.iter().map(|v| *v * *v).collect();
            let mean = sq.iter().copied().sum::<T>() / p;
            sq.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / p
        })
        .sum()
}

fn row_norms<T: Scalar>(loadings: &Array2<T>) -> Array1<T> {
    loadings.map_axis(Axis(1), |r| {
        let h = r.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if h > T::zero() {
            h
        } else {
            T::one()
        }
    })
}

/// Kaiser-normalized varimax by successive planar rotations.
///
/// Returns the rotated loadings in their natural column order; callers that
/// want the canonical ordering use [`varimax`].
fn varimax_raw<T: Scalar>(loadings: &Array2<T>, max_iter: usize, tol: T) -> (Array2<T>, Array2<T>) {
    let (p, m) = loadings.dim();
    let h = row_norms(loadings);
    let mut x = loadings.clone();
    for i in 0..p {
        let hi = h[i];
        x.row_mut(i).mapv_inplace(|v| v / hi);
    }
    let mut t = Array2::<T>::eye(m);
    let pf = T::from_usize(p).unwrap();
    let two = T::lit(2.0);
    let quarter = T::lit(0.25);
    for _ in 0..max_iter {
        let mut max_angle = T::zero();
        for j in 0..m {
            for k in (j + 1)..m {
                let (mut a, mut b, mut c, mut d) = (T::zero(), T::zero(), T::zero(), T::zero());
                for i in 0..p {
                    let (xj, xk) = (x[[i, j]], x[[i, k]]);
                    let u = xj * xj - xk * xk;
                    let v = two * xj * xk;
                    a += u;
                    b += v;
                    c += u * u - v * v;
                    d += u * v;
                }
                let num = two * d - two * a * b / pf;
                let den = c - (a * a - b * b) / pf;
                let phi = quarter * num.atan2(den);
                if phi.abs() > max_angle {
                    max_angle = phi.abs();
                }
                if phi.abs() <= tol {
                    continue;
                }
                let (s, cs) = phi.sin_cos();
                for i in 0..p {
                    let (xj, xk) = (x[[i, j]], x[[i, k]]);
                    x[[i, j]] = cs * xj + s * xk;
                    x[[i, k]] = -s * xj + cs * xk;
                }
                for i in 0..m {
                    let (tj, tk) = (t[[i, j]], t[[i, k]]);
                    t[[i, j]] = cs * tj + s * tk;
                    t[[i, k]] = -s * tj + cs * tk;
                }
            }
        }
        if max_angle <= tol {
            break;
        }
    }
    (loadings.dot(&t), t)
}

/// Orders columns by decreasing sum of squares and makes the largest-magnitude
/// entry of each column positive; applies the same signed permutation to the
/// transform and the factor correlations.
fn canonicalize<T: Scalar>(mut r: RotationResult<T>) -> RotationResult<T> {
    let m = r.loadings.ncols();
    let ss: Vec<T> = r.loadings.axis_iter(Axis(1)).map(|c| c.iter().map(|v| *v * *v).sum()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| ss[b].partial_cmp(&ss[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let signs: Vec<T> = order
        .iter()
        .map(|&j| {
            let col = r.loadings.column(j);
            let big = col.iter().fold(T::zero(), |acc, v| if v.abs() > acc.abs() { *v } else { acc });
            if big < T::zero() {
                -T::one()
            } else {
                T::one()
            }
        })
        .collect();
    let perm = |a: &Array2<T>| {
        let mut out = a.select(Axis(1), &order);
        for (c, s) in signs.iter().enumerate() {
            let s = *s;
            out.column_mut(c).mapv_inplace(|v| v * s);
        }
        out
    };
    r.loadings = perm(&r.loadings);
    r.transform = perm(&r.transform);
    let phi = r.factor_correlations.select(Axis(0), &order).select(Axis(1), &order);
    r.factor_correlations = Array2::from_shape_fn((m, m), |(i, j)| phi[[i, j]] * signs[i] * signs[j]);
    r
}

/// Orthogonal varimax rotation with Kaiser row normalization.
pub fn varimax<T: Scalar>(loadings: &Array2<T>, max_iter: usize, tol: f64) -> RotationResult<T> {
    let m = loadings.ncols();
    if m < 2 {
        return RotationResult {
            loadings: loadings.clone(),
            transform: Array2::eye(m),
            factor_correlations: Array2::eye(m),
        };
    }
    let (rotated, t) = varimax_raw(loadings, max_iter, T::lit(tol));
    canonicalize(RotationResult { loadings: rotated, transform: t, factor_correlations: Array2::eye(m) })
}

/// Promax: varimax, then a least-squares fit of the varimax loadings to the
/// target `sign(L)·|L|^power`, rescaled so the factor correlations have a
/// unit diagonal.
pub fn promax<T: Scalar>(loadings: &Array2<T>, power: u32) -> Result<RotationResult<T>> {
    let m = loadings.ncols();
    if m < 2 || loadings.nrows() < m {
        return Err(FimlError::Dimension("promax needs p >= m >= 2".into()));
    }
    if power < 1 {
        return Err(FimlError::Config("promax power must be at least 1".into()));
    }
    let (vm, t_vm) = varimax_raw(loadings, 1000, T::lit(1e-12));
    let target = vm.mapv(|v| v.signum() * v.abs().powi(power as i32));
    // U = (LᵀL)⁻¹ Lᵀ Q
    let gram = vm.t().dot(&vm).as_standard_layout().to_owned();
    let mut chol = gram.into_raw_vec_and_offset().0;
    cholesky(&mut chol, m).map_err(|_| FimlError::NotPositiveDefinite("promax least-squares system"))?;
    let mut inv = vec![T::zero(); m * m];
    chol_inverse(&chol, m, &mut inv);
    let gram_inv = Array2::from_shape_vec((m, m), inv).unwrap();
    let mut u = gram_inv.dot(&vm.t().dot(&target));
    let utu = u.t().dot(&u).as_standard_layout().to_owned();
    let mut chol = utu.into_raw_vec_and_offset().0;
    cholesky(&mut chol, m).map_err(|_| FimlError::NotPositiveDefinite("promax transform"))?;
    let mut inv = vec![T::zero(); m * m];
    chol_inverse(&chol, m, &mut inv);
    for c in 0..m {
        let s = inv[c * m + c].sqrt();
        u.column_mut(c).mapv_inplace(|v| v * s);
    }
    let transform = t_vm.dot(&u);
    let pattern = loadings.dot(&transform);
    let ttt = transform.t().dot(&transform).as_standard_layout().to_owned();
    let mut chol = ttt.into_raw_vec_and_offset().0;
    cholesky(&mut chol, m).map_err(|_| FimlError::NotPositiveDefinite("promax transform"))?;
    let mut phi = vec![T::zero(); m * m];
    chol_inverse(&chol, m, &mut phi);
    let mut phi = Array2::from_shape_vec((m, m), phi).unwrap();
    for i in 0..m {
        phi[[i, i]] = T::one();
    }
    Ok(canonicalize(RotationResult { loadings: pattern, transform, factor_correlations: phi }))
}
