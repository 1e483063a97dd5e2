//! Accuracy and timing experiment drivers.
//!
//! Every replication draws its seeds from `(master seed, N, q, mechanism,
//! replication)`, so a cell reproduces the same numbers whatever else is on
//! the grid. The two common-measure arms share their complete data and masks.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::ObservedDataset;
use crate::em::{fit, Algorithm, FitConfig};
use crate::error::{FimlError, Result};

use super::{apply_mcar, apply_nmar, calibrate_nmar_alpha, gen_complete_data, sqrt_metrics, Mechanism, NmarParams, SimDesign};

/// Largest share of failed fits a cell may have.
pub const FAILURE_CAP: f64 = 0.05;
const CALIBRATION_DRAWS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyGrid {
    pub ns: Vec<usize>,
    pub qs: Vec<usize>,
    pub mechanisms: Vec<Mechanism>,
    /// `true` keeps the common measures, `false` drops them before fitting.
    pub common_arms: Vec<bool>,
    pub replications: usize,
    pub seed: u64,
    pub blocks: usize,
    pub factors: usize,
    pub loading: f64,
    pub n_common: usize,
    pub nmar_slope: f64,
}

impl Default for AccuracyGrid {
    fn default() -> Self {
        Self {
            ns: vec![321, 1279],
            qs: vec![0],
            mechanisms: vec![Mechanism::Mcar],
            common_arms: vec![true],
            replications: 100,
            seed: 1,
            blocks: 30,
            factors: 3,
            loading: 0.8,
            n_common: 6,
            nmar_slope: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingGrid {
    pub n: usize,
    pub qs: Vec<usize>,
    pub algorithms: Vec<Algorithm>,
    pub runs: usize,
    pub seed: u64,
    pub blocks: usize,
    pub factors: usize,
    pub loading: f64,
    pub n_common: usize,
}

impl Default for TimingGrid {
    fn default() -> Self {
        Self {
            n: 2000,
            qs: (0..=80).step_by(10).collect(),
            algorithms: Algorithm::ALL.to_vec(),
            runs: 10,
            seed: 1,
            blocks: 30,
            factors: 3,
            loading: 0.8,
            n_common: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub mechanism: Mechanism,
    pub common: bool,
    pub n: usize,
    pub q: usize,
    /// Successful fits entering the metrics.
    pub replications: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub sqrt_mse: f64,
    pub sqrt_bias: f64,
    pub r: usize,
    pub mean_iterations: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub q: usize,
    pub algorithm: Algorithm,
    pub run: usize,
    pub seconds: f64,
    pub iterations: usize,
    pub loglik: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingSummary {
    pub q: usize,
    pub algorithm: Algorithm,
    pub runs: usize,
    pub mean_seconds: f64,
    pub mean_iterations: f64,
    /// Baseline mean time over this cell's mean time.
    pub speedup: f64,
}

fn check_nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return Err(FimlError::Config(format!("empty grid: no values for '{name}'")));
    }
    Ok(())
}

/// Seeds for data, mask and fit of one replication.
fn replication_seeds(master: u64, n: usize, q: usize, mech: Mechanism, rep: usize) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    let mech = match mech {
        Mechanism::Mcar => 0u64,
        Mechanism::Nmar => 1,
    };
    rng.set_stream(((n as u64) << 40) ^ ((q as u64) << 28) ^ (mech << 27) ^ rep as u64);
    [rng.next_u64(), rng.next_u64(), rng.next_u64()]
}

/// Intercept hitting the missing rate `q / (p − n_common)` on a large factor
/// sample independent of the replications.
fn nmar_params(design: &SimDesign, master: u64) -> Result<NmarParams> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(u64::MAX);
    let factors = ndarray::Array2::from_shape_simple_fn((CALIBRATION_DRAWS, design.m()), || rng.sample(StandardNormal));
    calibrate_nmar_alpha(&design.loadings, &factors, design.nmar_slope, design.missing_rate(), design.n_common)
}

struct Replication {
    estimates: Vec<Option<(ndarray::Array2<f64>, usize, bool)>>,
}

fn masked(
    design: &SimDesign,
    data: &ObservedDataset<f64>,
    factors: &ndarray::Array2<f64>,
    nmar: Option<NmarParams>,
    seed: u64,
) -> Result<ObservedDataset<f64>> {
    match (design.mechanism, nmar) {
        (Mechanism::Nmar, Some(a)) => apply_nmar(data, &design.loadings, factors, a, seed, design.n_common),
        _ => apply_mcar(data, design, seed),
    }
}

/// One replication for every requested arm, in `arms` order.
fn replicate(design: &SimDesign, arms: &[bool], nmar: Option<NmarParams>, master: u64, rep: usize, config: &FitConfig) -> Replication {
    let [data_seed, mask_seed, fit_seed] = replication_seeds(master, design.n, design.q, design.mechanism, rep);
    // EM runs unrestricted and is rotated onto the restriction afterwards: same
    // optimum, but no stalling where a leading diagonal loading passes through zero
    let restrict = config.algorithm == Algorithm::QuasiNewton;
    let config = FitConfig { seed: fit_seed, restrict, ..config.clone() };
    let sim = match gen_complete_data::<f64>(design, data_seed) {
        Ok(s) => s,
        Err(_) => return Replication { estimates: vec![None; arms.len()] },
    };
    let run = |keep_common: bool| -> Result<(ndarray::Array2<f64>, usize, bool)> {
        let (arm, data) = if keep_common {
            (design.clone(), sim.data.clone())
        } else {
            let keep: Vec<usize> = (design.n_common..design.p()).collect();
            (design.without_common(), sim.data.select_columns(&keep)?)
        };
        let data = masked(&arm, &data, &sim.factors, nmar, mask_seed)?;
        let r = fit(&data, arm.m(), &config)?;
        Ok((r.model.impose_restriction().lambda().clone(), r.iterations, r.converged))
    };
    Replication { estimates: arms.iter().map(|&c| run(c).ok()).collect() }
}

pub fn run_accuracy_experiment(grid: &AccuracyGrid, config: &FitConfig) -> Result<Vec<AccuracyRow>> {
    check_nonempty("n", &grid.ns)?;
    check_nonempty("q", &grid.qs)?;
    check_nonempty("mechanism", &grid.mechanisms)?;
    check_nonempty("common", &grid.common_arms)?;
    if grid.replications == 0 {
        return Err(FimlError::Config("empty grid: replications must be at least 1".into()));
    }
    config.validate()?;
    let mut rows = Vec::new();
    for &mechanism in &grid.mechanisms {
        for &q in &grid.qs {
            let mut base =
                SimDesign::blocks(grid.blocks, grid.factors, grid.loading, grid.n_common, grid.ns[0], q, mechanism)?;
            base.nmar_slope = grid.nmar_slope;
            let nmar = match mechanism {
                Mechanism::Nmar if q > 0 => Some(nmar_params(&base, grid.seed)?),
                Mechanism::Nmar => Some(NmarParams { intercept: f64::NEG_INFINITY, slope: 0.0 }),
                Mechanism::Mcar => None,
            };
            for &n in &grid.ns {
                let design = SimDesign { n, ..base.clone() };
                let reps: Vec<Replication> = (0..grid.replications)
                    .into_par_iter()
                    .map(|rep| replicate(&design, &grid.common_arms, nmar, grid.seed, rep, config))
                    .collect();
                for (a, &common) in grid.common_arms.iter().enumerate() {
                    let ok: Vec<&(ndarray::Array2<f64>, usize, bool)> =
                        reps.iter().filter_map(|r| r.estimates[a].as_ref()).collect();
                    let failures = grid.replications - ok.len();
                    if failures as f64 > FAILURE_CAP * grid.replications as f64 {
                        return Err(FimlError::FailureRate { failed: failures, total: grid.replications });
                    }
                    let (truth, first_row) = if common {
                        (design.loadings.clone(), design.n_common)
                    } else {
                        (design.without_common().loadings, 0)
                    };
                    let est: Vec<ndarray::Array2<f64>> = ok.iter().map(|e| e.0.clone()).collect();
                    let rep = sqrt_metrics(&est, &truth, first_row, true)?;
                    rows.push(AccuracyRow {
                        mechanism,
                        common,
                        n,
                        q,
                        replications: ok.len(),
                        failures,
                        nonconverged: ok.iter().filter(|e| !e.2).count(),
                        sqrt_mse: rep.sqrt_mse,
                        sqrt_bias: rep.sqrt_bias,
                        r: rep.r,
                        mean_iterations: ok.iter().map(|e| e.1 as f64).sum::<f64>() / ok.len() as f64,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Fits every algorithm on the same datasets and starting values. Runs are
/// executed one after another.
pub fn run_timing_experiment(grid: &TimingGrid, config: &FitConfig) -> Result<Vec<TimingRow>> {
    check_nonempty("q", &grid.qs)?;
    check_nonempty("algorithms", &grid.algorithms)?;
    if grid.runs == 0 || grid.n == 0 {
        return Err(FimlError::Config("empty grid: need n >= 1 and runs >= 1".into()));
    }
    config.validate()?;
    let mut rows = Vec::new();
    for &q in &grid.qs {
        let design =
            SimDesign::blocks(grid.blocks, grid.factors, grid.loading, grid.n_common, grid.n, q, Mechanism::Mcar)?;
        let mut failed: BTreeMap<Algorithm, usize> = BTreeMap::new();
        for run in 0..grid.runs {
            let [data_seed, mask_seed, fit_seed] = replication_seeds(grid.seed, grid.n, q, Mechanism::Mcar, run);
            let sim = gen_complete_data::<f64>(&design, data_seed)?;
            let data = apply_mcar(&sim.data, &design, mask_seed)?;
            for &algorithm in &grid.algorithms {
                let cfg = FitConfig { seed: fit_seed, restrict: true, algorithm, ..config.clone() };
                let clock = Instant::now();
                match fit(&data, design.m(), &cfg) {
                    Ok(r) => rows.push(TimingRow {
                        q,
                        algorithm,
                        run,
                        seconds: clock.elapsed().as_secs_f64(),
                        iterations: r.iterations,
                        loglik: r.loglik,
                        converged: r.converged,
                    }),
                    Err(_) => *failed.entry(algorithm).or_default() += 1,
                }
            }
        }
        for (_, f) in failed {
            if f as f64 > FAILURE_CAP * grid.runs as f64 {
                return Err(FimlError::FailureRate { failed: f, total: grid.runs });
            }
        }
    }
    Ok(rows)
}

/// Averages runs per `(q, algorithm)`; speedups are relative to the mean time
/// of `baseline`.
pub fn summarize_timing(rows: &[TimingRow], baseline: (usize, Algorithm)) -> Result<Vec<TimingSummary>> {
    let mut cells: BTreeMap<(usize, Algorithm), (usize, f64, f64)> = BTreeMap::new();
    for r in rows {
        let c = cells.entry((r.q, r.algorithm)).or_default();
        c.0 += 1;
        c.1 += r.seconds;
        c.2 += r.iterations as f64;
    }
    let base = cells
        .get(&baseline)
        .map(|c| c.1 / c.0 as f64)
        .ok_or_else(|| FimlError::Config(format!("baseline {} at q = {} has no runs", baseline.1, baseline.0)))?;
    Ok(cells
        .into_iter()
        .map(|((q, algorithm), (k, s, it))| {
            let mean = s / k as f64;
            TimingSummary { q, algorithm, runs: k, mean_seconds: mean, mean_iterations: it / k as f64, speedup: base / mean }
        })
        .collect())
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn write_accuracy_csv<W: Write>(rows: &[AccuracyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mechanism", "common", "n", "q", "replications", "failures", "nonconverged", "sqrt_mse", "sqrt_bias", "r",
        "mean_iterations",
    ])?;
    for r in rows {
        w.write_record([
            r.mechanism.to_string(),
            yes_no(r.common).into(),
            r.n.to_string(),
            r.q.to_string(),
            r.replications.to_string(),
            r.failures.to_string(),
            r.nonconverged.to_string(),
            format!("{:.6e}", r.sqrt_mse),
            format!("{:.6e}", r.sqrt_bias),
            r.r.to_string(),
            format!("{:.3}", r.mean_iterations),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line per plotted point: `log10 N` against `sqrt(N)·sqrtMSE` and
/// `sqrtBIAS`, grouped by series.
pub fn write_accuracy_plot_csv<W: Write>(rows: &[AccuracyRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "log10_n", "sqrt_mse", "sqrt_n_sqrt_mse", "sqrt_bias"])?;
    for r in rows {
        let series = format!("{}-q{}-{}", r.mechanism, r.q, if r.common { "common" } else { "nocommon" });
        w.write_record([
            series,
            format!("{:.6}", (r.n as f64).log10()),
            format!("{:.6e}", r.sqrt_mse),
            format!("{:.6e}", (r.n as f64).sqrt() * r.sqrt_mse),
            format!("{:.6e}", r.sqrt_bias),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q", "algorithm", "run", "seconds", "iterations", "loglik", "converged"])?;
    for r in rows {
        w.write_record([
            r.q.to_string(),
            r.algorithm.name().into(),
            r.run.to_string(),
            format!("{:.6}", r.seconds),
            r.iterations.to_string(),
            format!("{:.10e}", r.loglik),
            yes_no(r.converged).into(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_summary_csv<W: Write>(rows: &[TimingSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q", "algorithm", "runs", "mean_seconds", "mean_iterations", "speedup"])?;
    for r in rows {
        w.write_record([
            r.q.to_string(),
            r.algorithm.name().into(),
            r.runs.to_string(),
            format!("{:.6}", r.mean_seconds),
            format!("{:.3}", r.mean_iterations),
            format!("{:.4}", r.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}
