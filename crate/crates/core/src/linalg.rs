//! Small dense kernels on row-major slices.
//!
//! Everything the estimators factorize is symmetric positive definite and at
//! most `(m + 1) x (m + 1)`, so a plain Cholesky is all that is needed. The
//! routines work on caller-owned buffers so the per-case loops never allocate.

use crate::scalar::Scalar;

/// In-place lower Cholesky factorization of the `n x n` matrix `a`.
///
/// Only the lower triangle is read; on success it holds `L` with `A = L Lᵀ`
/// and the strict upper triangle is zeroed.
pub fn cholesky<T: Scalar>(a: &mut [T], n: usize) -> Result<(), ()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(());
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for i in 0..j {
            a[i * n + j] = T::zero();
        }
    }
    Ok(())
}

/// Solves `L Lᵀ x = b` in place given the factor from [`cholesky`].
pub fn chol_solve<T: Scalar>(l: &[T], n: usize, b: &mut [T]) {
    forward_solve(l, n, b);
    backward_solve(l, n, b);
}

/// `b ← L⁻¹ b`.
#[inline]
pub fn forward_solve<T: Scalar>(l: &[T], n: usize, b: &mut [T]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `b ← L⁻ᵀ b`.
#[inline]
pub fn backward_solve<T: Scalar>(l: &[T], n: usize, b: &mut [T]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `log |A|` from its Cholesky factor.
pub fn chol_logdet<T: Scalar>(l: &[T], n: usize) -> T {
    let mut s = T::zero();
    for i in 0..n {
        s += l[i * n + i].ln();
    }
    s + s
}

/// Writes `A⁻¹` into `out` given the Cholesky factor of `A`.
pub fn chol_inverse<T: Scalar>(l: &[T], n: usize, out: &mut [T]) {
    for j in 0..n {
        for i in 0..n {
            out[i * n + j] = if i == j { T::one() } else { T::zero() };
        }
    }
    let mut col = vec![T::zero(); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = out[i * n + j];
        }
        chol_solve(l, n, &mut col);
        for i in 0..n {
            out[i * n + j] = col[i];
        }
    }
    // symmetrize against rounding
    for i in 0..n {
        for j in 0..i {
            let v = (out[i * n + j] + out[j * n + i]) * T::lit(0.5);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
}

/// Solves the SPD system `A x = b` for a possibly principal sub-block of `A`
/// selected by `idx`. Returns `None` when the block is not positive definite.
pub fn solve_spd_subset<T: Scalar>(a: &[T], n: usize, b: &[T], idx: &[usize]) -> Option<Vec<T>> {
    let k = idx.len();
    let mut sub = vec![T::zero(); k * k];
    let mut rhs = vec![T::zero(); k];
    for (r, &i) in idx.iter().enumerate() {
        rhs[r] = b[i];
        for (c, &j) in idx.iter().enumerate() {
            sub[r * k + c] = a[i * n + j];
        }
    }
    cholesky(&mut sub, k).ok()?;
    chol_solve(&sub, k, &mut rhs);
    Some(rhs)
}
