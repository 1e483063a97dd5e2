mod common;

use common::*;
use fiml_core::em::{
    conditional_full_moments, estep_modified, estep_ordinary, mstep_modified, mstep_ordinary, FitConfig,
};
use fiml_core::sim::{apply_mcar, gen_complete_data, Mechanism, SimDesign};
use fiml_core::{fiml_gradients, fit, fit_em_from, fiml_loglik, Algorithm, EmVariant, FactorModel, ObservedDataset};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn em_config(restrict: bool) -> FitConfig {
    FitConfig { max_iter: 200, tol: 1e-12, restrict, ..FitConfig::default() }
}

fn nondecreasing(trace: &[f64]) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - 1e-10 * w[0].abs())
}

#[test]
fn ordinary_estep_matches_summed_full_moments() {
    let mut r = rng(21);
    let model = random_model(&mut r, 7, 2);
    let data = sample_data(&mut r, &model, 40, 0.5);
    let stats = estep_ordinary(&model, &data).unwrap();
    let (p, m) = (7, 2);
    let mut s_xx = DMatrix::<f64>::zeros(p, p);
    let mut s_fsx = DMatrix::<f64>::zeros(m + 1, p);
    let mut s_fsfs = DMatrix::<f64>::zeros(m + 1, m + 1);
    for c in 0..data.n() {
        let vals: Vec<f64> = data.values().row(c).to_vec();
        let mask: Vec<bool> = data.mask().row(c).to_vec();
        let fm = conditional_full_moments(&model, &vals, &mask).unwrap();
        let x = DVector::from_column_slice(fm.x_hat.as_slice().unwrap());
        let mut fs = DVector::zeros(m + 1);
        fs[0] = 1.0;
        for j in 0..m {
            fs[j + 1] = fm.f_hat[j];
        }
        s_xx += &x * x.transpose() + to_dmatrix(&fm.v_xx);
        let mut cov_fx = DMatrix::zeros(m + 1, p);
        for i in 0..p {
            for j in 0..m {
                cov_fx[(j + 1, i)] = fm.v_xf[[i, j]];
            }
        }
        s_fsx += &fs * x.transpose() + cov_fx;
        let mut vff = DMatrix::zeros(m + 1, m + 1);
        vff.view_mut((1, 1), (m, m)).copy_from(&to_dmatrix(&fm.v_ff));
        s_fsfs += &fs * fs.transpose() + vff;
    }
    let close = |a: &Array2<f64>, b: &DMatrix<f64>| (to_dmatrix(a) - b).norm() / b.norm() < 1e-11;
    assert!(close(&stats.s_xx, &s_xx));
    assert!(close(&stats.s_fsx, &s_fsx));
    assert!(close(&stats.s_fsfs, &s_fsfs));
}

#[test]
fn ordinary_mstep_is_regression_on_stats() {
    let mut r = rng(22);
    let model = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &model, 50, 0.3);
    let stats = estep_ordinary(&model, &data).unwrap();
    let next = mstep_ordinary(&stats, data.n(), false).unwrap();
    let b = to_dmatrix(&stats.s_fsfs).try_inverse().unwrap() * to_dmatrix(&stats.s_fsx);
    let n = data.n() as f64;
    for i in 0..6 {
        assert!((next.mu()[i] - b[(0, i)]).abs() < 1e-10);
        for j in 0..2 {
            assert!((next.lambda()[[i, j]] - b[(j + 1, i)]).abs() < 1e-10);
        }
        let col = to_dmatrix(&stats.s_fsx).column(i).into_owned();
        let psi = (stats.s_xx[[i, i]] - b.column(i).dot(&col)) / n;
        assert!((next.psi()[i] - psi).abs() < 1e-10);
    }
}

#[test]
fn modified_mstep_is_per_variable_regression() {
    let mut r = rng(23);
    let model = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &model, 60, 0.5);
    let moments = estep_modified(&model, &data).unwrap();
    let next = mstep_modified(&moments, &data, 2, false).unwrap();
    for i in 0..6 {
        let mut g = DMatrix::<f64>::zeros(3, 3);
        let mut h = DVector::<f64>::zeros(3);
        let mut sq = 0.0;
        let mut count = 0.0;
        for c in (0..data.n()).filter(|&c| data.mask()[[c, i]]) {
            let fm = &moments[c];
            let mut e = DMatrix::zeros(3, 3);
            e[(0, 0)] = 1.0;
            for a in 0..2 {
                e[(0, a + 1)] = fm.f_hat[a];
                e[(a + 1, 0)] = fm.f_hat[a];
                for b in 0..2 {
                    e[(a + 1, b + 1)] = fm.ff_hat[[a, b]];
                }
            }
            let x = data.values()[[c, i]];
            g += e;
            h += DVector::from_vec(vec![x, x * fm.f_hat[0], x * fm.f_hat[1]]);
            sq += x * x;
            count += 1.0;
        }
        let beta = g.clone().try_inverse().unwrap() * &h;
        assert!((next.mu()[i] - beta[0]).abs() < 1e-10);
        assert!((next.lambda()[[i, 0]] - beta[1]).abs() < 1e-10);
        assert!((next.lambda()[[i, 1]] - beta[2]).abs() < 1e-10);
        let psi = (sq - 2.0 * beta.dot(&h) + (beta.transpose() * &g * &beta)[(0, 0)]) / count;
        assert!((next.psi()[i] - psi).abs() < 1e-10);
    }
}

#[test]
fn variants_coincide_on_complete_data() {
    let mut r = rng(24);
    let model = random_model(&mut r, 8, 2);
    let data = sample_data(&mut r, &model, 80, 0.0);
    for restrict in [false, true] {
        let init = if restrict { model.impose_restriction() } else { model.clone() };
        let cfg = FitConfig { max_iter: 1, ..em_config(restrict) };
        let a = fit_em_from(&data, init.clone(), &cfg, EmVariant::Modified).unwrap();
        let b = fit_em_from(&data, init, &cfg, EmVariant::Ordinary).unwrap();
        assert!(a.model.max_abs_diff(&b.model) < 1e-10);
        assert!((a.loglik - b.loglik).abs() < 1e-9 * a.loglik.abs());
    }
}

#[test]
fn variants_differ_with_missing_values_but_share_the_optimum() {
    let mut r = rng(25);
    let truth = random_model(&mut r, 8, 2);
    let data = sample_data(&mut r, &truth, 300, 0.4);
    let init = truth.impose_restriction();
    let one = FitConfig { max_iter: 1, ..em_config(true) };
    let a = fit_em_from(&data, init.clone(), &one, EmVariant::Modified).unwrap();
    let b = fit_em_from(&data, init.clone(), &one, EmVariant::Ordinary).unwrap();
    assert!(a.model.max_abs_diff(&b.model) > 1e-6);

    let long = FitConfig { max_iter: 20_000, tol: 1e-14, restrict: true, ..FitConfig::default() };
    let a = fit_em_from(&data, init.clone(), &long, EmVariant::Modified).unwrap();
    let b = fit_em_from(&data, init, &long, EmVariant::Ordinary).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-6);
    assert!(a.model.max_abs_diff(&b.model) < 1e-3);
}

fn block_data(blocks: usize, n: usize, q: usize, seed: u64) -> ObservedDataset<f64> {
    let design = SimDesign::blocks(blocks, 3, 0.8, 6, n, q, Mechanism::Mcar).unwrap();
    let sim = gen_complete_data::<f64>(&design, seed).unwrap();
    apply_mcar(&sim.data, &design, seed + 1).unwrap()
}

// a relative-change stop at 1e-10 leaves about 5x this gradient here
#[test]
fn converged_fits_are_stationary() {
    for (k, restrict) in [false, true, false, true].into_iter().enumerate() {
        let data = block_data(8, 500, 10, 40 + k as u64);
        let algorithm = if k < 2 { Algorithm::ModifiedEm } else { Algorithm::OrdinaryEm };
        let cfg = FitConfig { max_iter: 50_000, tol: 1e-12, restrict, algorithm, seed: k as u64, ..FitConfig::default() };
        let res = fit(&data, 3, &cfg).unwrap();
        assert!(res.converged);
        let g = fiml_gradients(&res.model, &data).unwrap().norm(restrict);
        assert!(g <= 1e-5 * data.n() as f64, "{algorithm} restrict={restrict}: {g}");
    }
}

// 3x over the bound at the default tol
#[test]
fn modified_em_is_stationary_at_high_missingness() {
    let data = block_data(30, 2000, 80, 7);
    let res = fit(&data, 3, &FitConfig { tol: 1e-10, ..FitConfig::default() }).unwrap();
    assert!(res.converged);
    let g = fiml_gradients(&res.model, &data).unwrap().norm(false);
    assert!(g <= 1e-4 * data.n() as f64, "{g}");
}

// EM converges linearly, so the gradient left at a relative-change stop
// shrinks like sqrt(tol); on weakly determined models it needs a tight tol
#[test]
fn gradient_vanishes_as_tol_tightens() {
    let mut r = rng(29);
    for (k, restrict) in [false, true, false, true].into_iter().enumerate() {
        let truth = random_model(&mut r, 10, 2);
        let data = sample_data(&mut r, &truth, 400, 0.5);
        let variant = if k < 2 { EmVariant::Modified } else { EmVariant::Ordinary };
        let mut model = if restrict { truth.impose_restriction() } else { truth };
        let mut norms = Vec::new();
        for tol in [1e-9, 1e-11, 1e-13] {
            let cfg = FitConfig { max_iter: 100_000, tol, restrict, ..FitConfig::default() };
            let res = fit_em_from(&data, model, &cfg, variant).unwrap();
            assert!(res.converged);
            norms.push(fiml_gradients(&res.model, &data).unwrap().norm(restrict));
            model = res.model;
        }
        assert!(norms[1] < norms[0] && norms[2] < norms[1], "{norms:?}");
        assert!(norms[2] <= 1e-5 * data.n() as f64, "{variant:?} restrict={restrict}: {norms:?}");
    }
}

#[test]
fn restricted_fits_satisfy_the_restriction() {
    let mut r = rng(26);
    let truth = random_model(&mut r, 9, 3);
    let data = sample_data(&mut r, &truth, 200, 0.3);
    for algorithm in Algorithm::ALL {
        let cfg = FitConfig { algorithm, max_iter: 300, restrict: true, ..FitConfig::default() };
        let res = fit(&data, 3, &cfg).unwrap();
        assert!(res.model.satisfies_restriction(), "{algorithm}");
        for j in 0..3 {
            assert!(res.model.lambda()[[j, j]] >= 0.0);
        }
    }
}

#[test]
fn fits_are_reproducible() {
    let mut r = rng(27);
    let truth = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &truth, 100, 0.3);
    for algorithm in Algorithm::ALL {
        let cfg = FitConfig { algorithm, seed: 9, n_starts: 2, max_iter: 100, ..FitConfig::default() };
        let a = fit(&data, 2, &cfg).unwrap();
        let b = fit(&data, 2, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loglik_trace, b.loglik_trace);
    }
}

#[test]
fn multistart_keeps_the_best_start() {
    let mut r = rng(28);
    let truth = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &truth, 80, 0.4);
    let cfg = FitConfig { n_starts: 4, seed: 3, max_iter: 5, ..FitConfig::default() };
    let best = fit(&data, 2, &cfg).unwrap();
    for s in 0..4 {
        let init = FactorModel::initial(&data, 2, false, &mut cfg.start_rng(s)).unwrap();
        let one = fit_em_from(&data, init, &cfg, EmVariant::Modified).unwrap();
        assert!(one.loglik <= best.loglik);
    }
}

#[test]
fn reported_loglik_matches_final_model() {
    let mut r = rng(29);
    let truth = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &truth, 80, 0.4);
    for algorithm in Algorithm::ALL {
        let res = fit(&data, 2, &FitConfig { algorithm, restrict: true, ..FitConfig::default() }).unwrap();
        let direct = fiml_loglik(&res.model, &data).unwrap();
        assert!((res.loglik - direct).abs() < 1e-9 * direct.abs(), "{algorithm}");
        assert_eq!(*res.loglik_trace.last().unwrap(), res.loglik);
    }
}

#[test]
fn f32_fit_tracks_f64() {
    let mut r = rng(30);
    let truth = random_model(&mut r, 6, 2);
    let data = sample_data(&mut r, &truth, 200, 0.3);
    let data32 = ObservedDataset::new(data.values().mapv(|v| v as f32), data.mask().clone()).unwrap();
    let cfg = FitConfig { tol: 1e-6, restrict: true, max_iter: 2000, ..FitConfig::default() };
    let a = fit(&data, 2, &cfg).unwrap();
    let b = fit(&data32, 2, &cfg).unwrap();
    assert!((a.loglik - b.loglik as f64).abs() < 1e-3 * a.loglik.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_never_decreases_loglik(seed in 0u64..100_000, rate in 0.0f64..0.7, restrict: bool) {
        let mut r = rng(seed);
        let p = r.gen_range(3..=9);
        let m = r.gen_range(1..=2.min(p - 1));
        let truth = random_model(&mut r, p, m);
        let data = sample_data(&mut r, &truth, 60, rate);
        prop_assume!(data.nobs().0.iter().all(|&c| c > 0));
        for variant in [EmVariant::Modified, EmVariant::Ordinary] {
            let cfg = FitConfig { seed, max_iter: 60, ..em_config(restrict) };
            let init = FactorModel::initial(&data, m, restrict, &mut cfg.start_rng(0)).unwrap();
            let res = fit_em_from(&data, init, &cfg, variant).unwrap();
            prop_assert!(nondecreasing(&res.loglik_trace));
        }
    }

    #[test]
    fn pack_unpack_roundtrip(seed in 0u64..100_000, restrict: bool) {
        let mut r = rng(seed);
        let p = r.gen_range(1..=8);
        let m = r.gen_range(1..=3);
        let mut model = random_model(&mut r, p, m);
        if restrict {
            model = model.impose_restriction();
        }
        let packed = fiml_core::quasi_newton::pack(&model, restrict).unwrap();
        prop_assert_eq!(packed.len(), fiml_core::quasi_newton::packed_len(p, m, restrict));
        let back = fiml_core::quasi_newton::unpack(&packed);
        prop_assert!(back.max_abs_diff(&model) < 1e-12);
    }
}
