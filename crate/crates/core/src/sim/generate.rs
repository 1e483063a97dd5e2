use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::model::FactorModel;
use crate::scalar::Scalar;

use super::SimDesign;

const NMAR_RETRIES: usize = 1000;

/// A generated sample with the quantities it was drawn from.
#[derive(Debug, Clone)]
pub struct SimData<T> {
    pub data: ObservedDataset<T>,
    pub truth: FactorModel<T>,
    /// Latent scores, `N x m`.
    pub factors: Array2<f64>,
}

/// Intercept and slope of the NMAR logistic `1 / (1 + exp(−(a₀ + a₁ λᵢᵀf)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmarParams {
    pub intercept: f64,
    pub slope: f64,
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Draws `f ~ N(0, I)`, `ε ~ N(0, Ψ)` and `x = Λf + ε` for every case.
pub fn gen_complete_data<T: Scalar>(design: &SimDesign, seed: u64) -> Result<SimData<T>> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, p, m) = (design.n, design.p(), design.m());
    let sd = design.psi.mapv(f64::sqrt);
    let mut factors = Array2::<f64>::zeros((n, m));
    let mut values = Array2::<T>::zeros((n, p));
    for c in 0..n {
        for j in 0..m {
            factors[[c, j]] = rng.sample(StandardNormal);
        }
        let f = factors.row(c);
        for i in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            values[[c, i]] = T::lit(design.loadings.row(i).dot(&f) + sd[i] * e);
        }
    }
    Ok(SimData { data: ObservedDataset::complete(values)?, truth: design.true_model(), factors })
}

/// Masks exactly `design.q` uniformly chosen non-common variables per case.
pub fn apply_mcar<T: Scalar>(data: &ObservedDataset<T>, design: &SimDesign, seed: u64) -> Result<ObservedDataset<T>> {
    let p = data.p();
    let free = p.checked_sub(design.n_common).filter(|&f| design.q <= f).ok_or_else(|| {
        FimlError::Config(format!("q = {} with {} common of {} variables", design.q, design.n_common, p))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Array2::from_elem((data.n(), p), true);
    if design.q > 0 {
        for c in 0..data.n() {
            for k in sample(&mut rng, free, design.q).iter() {
                mask[[c, design.n_common + k]] = false;
            }
        }
    }
    data.with_mask(mask)
}

fn mean_rate(loadings: &Array2<f64>, factors: &Array2<f64>, n_common: usize, slope: f64, intercept: f64) -> f64 {
    let scores = factors.dot(&loadings.t());
    let cells = scores.nrows() * (scores.ncols() - n_common);
    let total: f64 = scores.rows().into_iter().map(|r| nmar_row_sum(r, n_common, slope, intercept)).sum();
    total / cells as f64
}

fn nmar_row_sum(scores: ArrayView1<f64>, n_common: usize, slope: f64, intercept: f64) -> f64 {
    scores.iter().skip(n_common).map(|&s| logistic(intercept + slope * s)).sum()
}

/// Finds the intercept that makes the mean missing probability over the
/// non-common cells of `factors` equal to `target_rate`, by bisection.
pub fn calibrate_nmar_alpha(
    loadings: &Array2<f64>,
    factors: &Array2<f64>,
    slope: f64,
    target_rate: f64,
    n_common: usize,
) -> Result<NmarParams> {
    if !(target_rate > 0.0 && target_rate < 1.0) || !slope.is_finite() {
        return Err(FimlError::Unattainable(target_rate));
    }
    if factors.ncols() != loadings.ncols() || n_common >= loadings.nrows() || factors.nrows() == 0 {
        return Err(FimlError::Dimension("factor sample does not match the loadings".into()));
    }
    let rate = |a: f64| mean_rate(loadings, factors, n_common, slope, a);
    if slope == 0.0 {
        let t = target_rate;
        return Ok(NmarParams { intercept: (t / (1.0 - t)).ln(), slope });
    }
    let (mut lo, mut hi) = (-50.0, 50.0);
    if !(rate(lo) < target_rate && rate(hi) > target_rate) {
        return Err(FimlError::Unattainable(target_rate));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok(NmarParams { intercept: 0.5 * (lo + hi), slope })
}

/// Masks each non-common cell with its logistic probability. Cases left with
/// nothing observed are redrawn.
pub fn apply_nmar<T: Scalar>(
    data: &ObservedDataset<T>,
    loadings: &Array2<f64>,
    factors: &Array2<f64>,
    params: NmarParams,
    seed: u64,
    n_common: usize,
) -> Result<ObservedDataset<T>> {
    let (n, p) = (data.n(), data.p());
    if loadings.nrows() != p || factors.nrows() != n || factors.ncols() != loadings.ncols() || n_common > p {
        return Err(FimlError::Dimension("NMAR inputs do not match the dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // redraws use their own stream so the first pass does not depend on them
    let mut retry_rng = ChaCha8Rng::seed_from_u64(seed);
    retry_rng.set_stream(1);
    let mut mask = Array2::from_elem((n, p), true);
    let mut prob = vec![0.0; p];
    for c in 0..n {
        let f = factors.row(c);
        for i in n_common..p {
            prob[i] = logistic(params.intercept + params.slope * loadings.row(i).dot(&f));
        }
        let draw = |rng: &mut ChaCha8Rng, row: &mut [bool]| {
            for i in n_common..p {
                row[i] = rng.gen::<f64>() >= prob[i];
            }
        };
        let row = mask.row_mut(c).into_slice().unwrap();
        draw(&mut rng, row);
        let mut tries = 0;
        while !row.iter().any(|&o| o) {
            if tries == NMAR_RETRIES {
                return Err(FimlError::RetryBudget(c));
            }
            draw(&mut retry_rng, row);
            tries += 1;
        }
    }
    data.with_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Mechanism;
    use ndarray::Array1;

    fn small(n: usize, q: usize) -> SimDesign {
        SimDesign::standard(n, q, Mechanism::Mcar).unwrap()
    }

    #[test]
    fn same_seed_same_data() {
        let d = small(50, 40);
        let a = gen_complete_data::<f64>(&d, 7).unwrap();
        let b = gen_complete_data::<f64>(&d, 7).unwrap();
        assert_eq!(a.data.values(), b.data.values());
        let ma = apply_mcar(&a.data, &d, 3).unwrap();
        let mb = apply_mcar(&b.data, &d, 3).unwrap();
        assert_eq!(ma.mask(), mb.mask());
        assert_ne!(gen_complete_data::<f64>(&d, 8).unwrap().data.values(), a.data.values());
    }

    #[test]
    fn zero_model_gives_zero_data() {
        let d = SimDesign {
            loadings: Array2::zeros((4, 1)),
            psi: Array1::zeros(4),
            n: 20,
            q: 0,
            n_common: 0,
            mechanism: Mechanism::Mcar,
            nmar_slope: 1.0,
        };
        let s = gen_complete_data::<f64>(&d, 1).unwrap();
        assert!(s.data.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn column_means_near_zero() {
        let n = 20000;
        let s = gen_complete_data::<f64>(&small(n, 0), 11).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for col in s.data.values().columns() {
            assert!(col.mean().unwrap().abs() < bound);
        }
    }

    #[test]
    fn mcar_keeps_common_and_counts() {
        let d = small(300, 80);
        let s = gen_complete_data::<f64>(&d, 2).unwrap();
        let x = apply_mcar(&s.data, &d, 9).unwrap();
        for row in x.mask().rows() {
            assert_eq!(row.iter().filter(|&&o| o).count(), 10);
            assert!(row.iter().take(6).all(|&o| o));
        }
        let d0 = small(30, 0);
        let x0 = apply_mcar(&s.data, &d0, 9).unwrap();
        assert!(x0.mask().iter().all(|&o| o));
        assert!(apply_mcar(&s.data, &small(30, 84), 1).is_ok());
        let bad = SimDesign { q: 85, ..d0 };
        assert!(apply_mcar(&s.data, &bad, 1).is_err());
    }

    #[test]
    fn calibration_edge_cases() {
        let d = small(2000, 80);
        let s = gen_complete_data::<f64>(&d, 5).unwrap();
        let a = calibrate_nmar_alpha(&d.loadings, &s.factors, 0.0, 0.5, 6).unwrap();
        assert_eq!(a.intercept, 0.0);
        assert!(matches!(calibrate_nmar_alpha(&d.loadings, &s.factors, 1.0, 0.0, 6), Err(FimlError::Unattainable(_))));
        assert!(calibrate_nmar_alpha(&d.loadings, &s.factors, 1.0, 1.0, 6).is_err());
    }

    #[test]
    fn calibrated_rate_holds_on_fresh_factors() {
        let d = small(4000, 80);
        let fit_sample = gen_complete_data::<f64>(&d, 5).unwrap();
        let target = 80.0 / 84.0;
        let a = calibrate_nmar_alpha(&d.loadings, &fit_sample.factors, 1.0, target, 6).unwrap();
        let fresh = gen_complete_data::<f64>(&d, 6).unwrap();
        let x = apply_nmar(&fresh.data, &d.loadings, &fresh.factors, a, 17, 6).unwrap();
        let missing = x.mask().iter().filter(|&&o| !o).count() as f64;
        let rate = missing / (4000.0 * 84.0);
        assert!((rate - target).abs() < 0.005, "rate {rate}");
    }

    #[test]
    fn nmar_coin_flip_and_common_forced() {
        let d = small(10000, 42);
        let s = gen_complete_data::<f64>(&d, 3).unwrap();
        let x = apply_nmar(&s.data, &d.loadings, &s.factors, NmarParams { intercept: 0.0, slope: 0.0 }, 4, 6)
            .unwrap();
        let missing = x.mask().iter().filter(|&&o| !o).count() as f64;
        assert!((missing / (10000.0 * 84.0) - 0.5).abs() < 0.01);
        assert!(x.mask().rows().into_iter().all(|r| r.iter().take(6).all(|&o| o)));
    }

    #[test]
    fn nmar_steep_slope_hides_large_scores() {
        let d = small(5000, 42);
        let s = gen_complete_data::<f64>(&d, 3).unwrap();
        let x = apply_nmar(&s.data, &d.loadings, &s.factors, NmarParams { intercept: 0.0, slope: 25.0 }, 4, 6)
            .unwrap();
        let scores = s.factors.dot(&d.loadings.t());
        let mut cells: Vec<(f64, bool)> = Vec::new();
        for c in 0..5000 {
            for i in 6..90 {
                cells.push((scores[[c, i]], x.mask()[[c, i]]));
            }
        }
        cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top = &cells[..cells.len() / 10];
        let rate = top.iter().filter(|c| !c.1).count() as f64 / top.len() as f64;
        assert!(rate >= 0.95, "top-decile missing rate {rate}");
    }

    #[test]
    fn nmar_redraws_empty_cases() {
        let d = SimDesign { n_common: 0, ..small(500, 80) };
        let s = gen_complete_data::<f64>(&d, 3).unwrap();
        let a = NmarParams { intercept: 4.0, slope: 1.0 };
        let x = apply_nmar(&s.data, &d.loadings, &s.factors, a, 4, 0).unwrap();
        assert!(x.mask().rows().into_iter().all(|r| r.iter().any(|&o| o)));
    }
}
