use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ObservedDataset;
use crate::error::{FimlError, Result};
use crate::model::FactorModel;
use crate::quasi_newton;
use crate::scalar::Scalar;

use super::{estep_ordinary_with_loglik, modified_stats, mstep_ordinary};

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    ModifiedEm,
    OrdinaryEm,
    QuasiNewton,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::ModifiedEm, Algorithm::OrdinaryEm, Algorithm::QuasiNewton];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ModifiedEm => "modified-em",
            Algorithm::OrdinaryEm => "ordinary-em",
            Algorithm::QuasiNewton => "quasi-newton",
        }
    }

    /// Human-readable label used in benchmark summaries.
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::ModifiedEm => "modified EM algorithm",
            Algorithm::OrdinaryEm => "ordinary EM algorithm",
            Algorithm::QuasiNewton => "quasi-Newton method",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FimlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "modified-em" => Ok(Algorithm::ModifiedEm),
            "ordinary-em" => Ok(Algorithm::OrdinaryEm),
            "quasi-newton" => Ok(Algorithm::QuasiNewton),
            other => Err(FimlError::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmVariant {
    Ordinary,
    Modified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop once `|ℓₜ − ℓₜ₋₁| / (|ℓₜ₋₁| + 1)` drops below this.
    pub tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Impose `λᵢⱼ = 0` for `j > i` with a non-negative diagonal.
    pub restrict: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { max_iter: 10_000, tol: 1e-8, n_starts: 1, seed: 0, algorithm: Algorithm::ModifiedEm, restrict: false }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(FimlError::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(FimlError::Config("tol must be positive".into()));
        }
        if self.n_starts < 1 {
            return Err(FimlError::Config("need at least one start".into()));
        }
        Ok(())
    }

    /// Generator for start `index`; every algorithm sees the same starts.
    pub fn start_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: FactorModel<T>,
    pub loglik: T,
    /// Parameter updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// Seconds spent in the whole fit, all starts included.
    pub wall_time: f64,
    /// `ℓ` at the starting point followed by `ℓ` after each update.
    pub loglik_trace: Vec<T>,
    pub algorithm: Algorithm,
    /// Start that produced `model`.
    pub start: usize,
    /// Diagnostics for starts that failed.
    pub failed_starts: Vec<String>,
}

pub fn relative_change<T: Scalar>(new: T, old: T) -> T {
    (new - old).abs() / (old.abs() + T::one())
}

fn check_observed<T: Scalar>(data: &ObservedDataset<T>) -> Result<()> {
    if let Some(i) = data.nobs().0.iter().position(|&c| c == 0) {
        return Err(FimlError::UnobservedVariable(i));
    }
    Ok(())
}

/// Fits with the algorithm named in `config`, trying `config.n_starts`
/// random starts and keeping the highest final log-likelihood.
pub fn fit<T: Scalar>(data: &ObservedDataset<T>, m: usize, config: &FitConfig) -> Result<FitResult<T>> {
    match config.algorithm {
        Algorithm::ModifiedEm => fit_em(data, m, config, EmVariant::Modified),
        Algorithm::OrdinaryEm => fit_em(data, m, config, EmVariant::Ordinary),
        Algorithm::QuasiNewton => quasi_newton::fit_quasi_newton(data, m, config),
    }
}

pub(crate) fn multi_start<T, F>(data: &ObservedDataset<T>, m: usize, config: &FitConfig, run: F) -> Result<FitResult<T>>
where
    T: Scalar,
    F: Fn(FactorModel<T>) -> Result<FitResult<T>>,
{
    config.validate()?;
    check_observed(data)?;
    let clock = Instant::now();
    let mut best: Option<FitResult<T>> = None;
    let mut failures = Vec::new();
    for s in 0..config.n_starts {
        let init = FactorModel::initial(data, m, config.restrict, &mut config.start_rng(s))?;
        match run(init) {
            Ok(mut r) => {
                r.start = s;
                if best.as_ref().map_or(true, |b| r.loglik > b.loglik) {
                    best = Some(r);
                }
            }
            Err(e) => failures.push(format!("start {s}: {e}")),
        }
    }
    match best {
        Some(mut r) => {
            r.failed_starts = failures;
            r.wall_time = clock.elapsed().as_secs_f64();
            Ok(r)
        }
        None => Err(FimlError::AllStartsFailed(failures)),
    }
}

pub fn fit_em<T: Scalar>(data: &ObservedDataset<T>, m: usize, config: &FitConfig, variant: EmVariant) -> Result<FitResult<T>> {
    multi_start(data, m, config, |init| fit_em_from(data, init, config, variant))
}

/// Runs one EM sequence from `init`.
pub fn fit_em_from<T: Scalar>(
    data: &ObservedDataset<T>,
    init: FactorModel<T>,
    config: &FitConfig,
    variant: EmVariant,
) -> Result<FitResult<T>> {
    config.validate()?;
    check_observed(data)?;
    let clock = Instant::now();
    let mut model = if config.restrict && !init.satisfies_restriction() { init.impose_restriction() } else { init };
    let tol = T::lit(config.tol);
    let n = data.n();
    let restrict = config.restrict;

    enum Stats<T> {
        Ordinary(super::SufficientStats<T>),
        Modified(super::modified::ModifiedStats<T>),
    }
    let estep = |model: &FactorModel<T>| -> Result<(Stats<T>, T)> {
        let (st, ll) = match variant {
            EmVariant::Ordinary => estep_ordinary_with_loglik(model, data).map(|(s, l)| (Stats::Ordinary(s), l))?,
            EmVariant::Modified => modified_stats(model, data).map(|(s, l)| (Stats::Modified(s), l))?,
        };
        if !ll.is_finite() {
            return Err(FimlError::InvalidModel("log-likelihood is not finite".into()));
        }
        Ok((st, ll))
    };

    let (mut stats, mut ll) = estep(&model)?;
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iter {
        let next = match &stats {
            Stats::Ordinary(s) => mstep_ordinary(s, n, restrict)?,
            Stats::Modified(s) => s.mstep(restrict)?,
        };
        let (next_stats, next_ll) = estep(&next)?;
        iterations += 1;
        trace.push(next_ll);
        model = next;
        let change = relative_change(next_ll, ll);
        stats = next_stats;
        ll = next_ll;
        if change < tol {
            converged = true;
            break;
        }
    }
    if restrict {
        model.apply_sign_convention();
    }
    let algorithm = match variant {
        EmVariant::Ordinary => Algorithm::OrdinaryEm,
        EmVariant::Modified => Algorithm::ModifiedEm,
    };
    Ok(FitResult {
        model,
        loglik: ll,
        iterations,
        converged,
        wall_time: clock.elapsed().as_secs_f64(),
        loglik_trace: trace,
        algorithm,
        start: 0,
        failed_starts: Vec::new(),
    })
}
