//! Dense reference computations and random instances shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use fiml_core::{FactorModel, ObservedDataset};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(rng: &mut impl Rng, p: usize, m: usize) -> FactorModel<f64> {
    let mu = Array1::from_shape_fn(p, |_| rng.gen_range(-1.0..1.0));
    let lambda = Array2::from_shape_fn((p, m), |_| rng.gen_range(-1.0..1.0));
    let psi = Array1::from_shape_fn(p, |_| rng.gen_range(0.2..1.5));
    FactorModel::new(mu, lambda, psi).unwrap()
}

/// Random mask with every row observing at least one variable.
pub fn random_mask(rng: &mut impl Rng, n: usize, p: usize, rate: f64) -> Array2<bool> {
    let mut mask = Array2::from_shape_fn((n, p), |_| rng.gen::<f64>() >= rate);
    for mut row in mask.rows_mut() {
        if !row.iter().any(|&o| o) {
            row[rng.gen_range(0..p)] = true;
        }
    }
    mask
}

/// Draws `n` cases from `model` and hides cells at the given rate.
pub fn sample_data(rng: &mut impl Rng, model: &FactorModel<f64>, n: usize, rate: f64) -> ObservedDataset<f64> {
    let (p, m) = (model.p(), model.m());
    let mut values = Array2::zeros((n, p));
    for c in 0..n {
        let f: Vec<f64> = (0..m).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        for i in 0..p {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let mut v = model.mu()[i] + model.psi()[i].sqrt() * e;
            for j in 0..m {
                v += model.lambda()[[i, j]] * f[j];
            }
            values[[c, i]] = v;
        }
    }
    let mask = random_mask(rng, n, p, rate);
    ObservedDataset::new(values, mask).unwrap()
}

pub fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Covariance of the stacked vector `(x, f)`.
pub fn joint_covariance(model: &FactorModel<f64>) -> DMatrix<f64> {
    let (p, m) = (model.p(), model.m());
    let l = to_dmatrix(model.lambda());
    let mut s = DMatrix::zeros(p + m, p + m);
    let sxx = &l * l.transpose() + DMatrix::from_diagonal(&DVector::from_iterator(p, model.psi().iter().copied()));
    s.view_mut((0, 0), (p, p)).copy_from(&sxx);
    s.view_mut((0, p), (p, m)).copy_from(&l);
    s.view_mut((p, 0), (m, p)).copy_from(&l.transpose());
    s.view_mut((p, p), (m, m)).copy_from(&DMatrix::identity(m, m));
    s
}

/// Mean and covariance of the unobserved part of `(x, f)` given the
/// observed coordinates, by textbook Gaussian conditioning.
pub struct DenseConditional {
    /// Indices into `(x, f)` of the conditioned-on coordinates' complement.
    pub rest: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn dense_conditional(model: &FactorModel<f64>, values: &[f64], mask: &[bool]) -> DenseConditional {
    let (p, m) = (model.p(), model.m());
    let s = joint_covariance(model);
    let obs: Vec<usize> = (0..p).filter(|&i| mask[i]).collect();
    let rest: Vec<usize> = (0..p + m).filter(|&i| i >= p || !mask[i]).collect();
    let mean_full: Vec<f64> = (0..p + m).map(|i| if i < p { model.mu()[i] } else { 0.0 }).collect();
    let s_oo = s.select_rows(&obs).select_columns(&obs);
    let s_ro = s.select_rows(&rest).select_columns(&obs);
    let s_rr = s.select_rows(&rest).select_columns(&rest);
    let mean_r = DVector::from_iterator(rest.len(), rest.iter().map(|&i| mean_full[i]));
    if obs.is_empty() {
        return DenseConditional { rest, mean: mean_r, cov: s_rr };
    }
    let resid = DVector::from_iterator(obs.len(), obs.iter().map(|&i| values[i] - mean_full[i]));
    let inv = s_oo.try_inverse().expect("observed covariance invertible");
    let mean = mean_r + &s_ro * &inv * resid;
    let cov = s_rr - &s_ro * inv * s_ro.transpose();
    DenseConditional { rest, mean, cov }
}

/// `Σ_o` for one mask row, formed explicitly.
pub fn dense_sigma_obs(model: &FactorModel<f64>, mask: &[bool]) -> DMatrix<f64> {
    let obs: Vec<usize> = (0..model.p()).filter(|&i| mask[i]).collect();
    let s = to_dmatrix(&model.implied_covariance());
    s.select_rows(&obs).select_columns(&obs)
}

/// Sum of per-case multivariate normal log densities, dense.
pub fn dense_loglik(model: &FactorModel<f64>, data: &ObservedDataset<f64>) -> f64 {
    let mut total = 0.0;
    for c in 0..data.n() {
        let mask: Vec<bool> = data.mask().row(c).to_vec();
        let obs: Vec<usize> = (0..data.p()).filter(|&i| mask[i]).collect();
        let sig = dense_sigma_obs(model, &mask);
        let r = DVector::from_iterator(obs.len(), obs.iter().map(|&i| data.values()[[c, i]] - model.mu()[i]));
        let det = sig.determinant();
        let inv = sig.try_inverse().unwrap();
        let q = (r.transpose() * inv * &r)[(0, 0)];
        total += -0.5 * (obs.len() as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + q);
    }
    total
}

/// Relative error `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

/// Central finite-difference gradient of `ℓ` with respect to `(μ, Λ, ψ)`,
/// flattened in that order.
pub fn fd_gradient(model: &FactorModel<f64>, data: &ObservedDataset<f64>, h: f64) -> Vec<f64> {
    let (mu, lambda, psi) = model.clone().into_parts();
    let mut theta: Vec<f64> = mu.iter().chain(lambda.iter()).chain(psi.iter()).copied().collect();
    let (p, m) = (model.p(), model.m());
    let build = |t: &[f64]| {
        FactorModel::new(
            Array1::from_vec(t[..p].to_vec()),
            Array2::from_shape_vec((p, m), t[p..p + p * m].to_vec()).unwrap(),
            Array1::from_vec(t[p + p * m..].to_vec()),
        )
        .unwrap()
    };
    let mut out = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = theta[k];
        let step = h * orig.abs().max(1.0);
        theta[k] = orig + step;
        let up = fiml_core::fiml_loglik(&build(&theta), data).unwrap();
        theta[k] = orig - step;
        let down = fiml_core::fiml_loglik(&build(&theta), data).unwrap();
        theta[k] = orig;
        out.push((up - down) / (2.0 * step));
    }
    out
}

pub fn flatten_gradients(g: &fiml_core::Gradients<f64>) -> Vec<f64> {
    g.mu.iter().chain(g.lambda.iter()).chain(g.psi.iter()).copied().collect()
}
