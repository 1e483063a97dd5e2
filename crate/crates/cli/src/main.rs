//! `fiml`: fit factor models to incomplete data, run Monte Carlo accuracy
//! studies and time the estimators.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use fiml_core::em::EmVariant;
use fiml_core::io::{load_csv, ModelFile, DEFAULT_MISSING};
use fiml_core::quasi_newton::fit_quasi_newton_from;
use fiml_core::sim::{
    parse_config, run_accuracy_experiment, run_timing_experiment, summarize_timing, write_accuracy_csv,
    write_accuracy_plot_csv, write_timing_csv, write_timing_summary_csv, ExperimentConfig,
};
use fiml_core::{fit, fit_em_from, promax, varimax, Algorithm, FimlError, FitConfig, FitResult, RotationResult};
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "fiml", version, about = "Maximum likelihood factor analysis for data with many missing values")]
struct Cli {
    /// Worker threads for the per-case computations.
    #[arg(long, global = true, env = "FIML_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a factor model to a CSV file.
    Fit(FitArgs),
    /// Run an accuracy experiment described by a config file.
    Simulate(ExperimentArgs),
    /// Run a timing experiment described by a config file.
    Benchmark(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Rotation {
    None,
    Varimax,
    Promax,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    factors: usize,
    #[arg(long, default_value = "modified-em", value_parser = parse_algorithm)]
    algorithm: Algorithm,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fix λᵢⱼ = 0 for j > i.
    #[arg(long)]
    restrict: bool,
    #[arg(long, value_enum, default_value = "none")]
    rotation: Rotation,
    #[arg(long, default_value_t = 4)]
    promax_power: u32,
    /// Model file to write; printed to stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Start from this model file instead of random starts.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Cell contents read as missing (repeatable). Defaults to empty and "NA".
    #[arg(long = "missing", allow_hyphen_values = true)]
    missing: Vec<String>,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// `key=value` settings applied after the config file.
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Results table (CSV).
    #[arg(long)]
    output: PathBuf,
    /// Secondary table: plot data for `simulate`, per-cell means for `benchmark`.
    #[arg(long)]
    summary_output: Option<PathBuf>,
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: FimlError| e.to_string())
}

enum Failure {
    Usage(String),
    Numeric(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Numeric(e)
    }
}

fn usage_or_numeric(e: FimlError) -> Failure {
    match e {
        FimlError::Config(_) => Failure::Usage(e.to_string()),
        other => Failure::Numeric(other.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let res = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_experiment(a, false),
        Command::Benchmark(a) => cmd_experiment(a, true),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_fit(a: FitArgs) -> Result<(), Failure> {
    let config = FitConfig {
        max_iter: a.max_iter,
        tol: a.tol,
        n_starts: a.starts,
        seed: a.seed,
        algorithm: a.algorithm,
        restrict: a.restrict,
    };
    config.validate().map_err(usage_or_numeric)?;
    if a.factors == 0 {
        return Err(Failure::Usage("--factors must be at least 1".into()));
    }
    if a.promax_power == 0 {
        return Err(Failure::Usage("--promax-power must be at least 1".into()));
    }
    let tokens: Vec<&str> =
        if a.missing.is_empty() { DEFAULT_MISSING.to_vec() } else { a.missing.iter().map(String::as_str).collect() };
    let csv = load_csv::<f64>(&a.input, &tokens).with_context(|| format!("reading {}", a.input.display()))?;
    let data = csv.data;

    let result: FitResult<f64> = match &a.init {
        None => fit(&data, a.factors, &config).context("fit failed")?,
        Some(path) => {
            let start = ModelFile::<f64>::load(path).with_context(|| format!("reading {}", path.display()))?;
            if start.model.p() != data.p() || start.model.m() != a.factors {
                return Err(Failure::Usage(format!(
                    "initial model is {} x {}, data needs {} x {}",
                    start.model.p(),
                    start.model.m(),
                    data.p(),
                    a.factors
                )));
            }
            match a.algorithm {
                Algorithm::ModifiedEm => fit_em_from(&data, start.model, &config, EmVariant::Modified),
                Algorithm::OrdinaryEm => fit_em_from(&data, start.model, &config, EmVariant::Ordinary),
                Algorithm::QuasiNewton => fit_quasi_newton_from(&data, start.model, &config),
            }
            .context("fit failed")?
        }
    };
    let restricted = a.restrict || a.algorithm == Algorithm::QuasiNewton;

    println!("algorithm: {}", result.algorithm.label());
    println!("log-likelihood: {:.6}", result.loglik);
    println!(
        "iterations: {} ({})",
        result.iterations,
        if result.converged { "converged" } else { "not converged" }
    );
    println!("wall time: {:.3} seconds", result.wall_time);
    for f in &result.failed_starts {
        eprintln!("warning: {f}");
    }

    let rotated = match a.rotation {
        Rotation::None => None,
        Rotation::Varimax => Some(("varimax", varimax(result.model.lambda(), 1000, 1e-10))),
        Rotation::Promax => {
            Some(("promax", promax(result.model.lambda(), a.promax_power).context("promax rotation failed")?))
        }
    };
    if let Some((name, r)) = &rotated {
        print_rotation(name, r, &csv.header);
    }

    let file = ModelFile::from_fit(&result, restricted);
    match &a.output {
        Some(path) => file.save(path).with_context(|| format!("writing {}", path.display()))?,
        None => file.write(std::io::stdout().lock()).context("writing model")?,
    }
    Ok(())
}

fn print_rotation(name: &str, r: &RotationResult<f64>, header: &[String]) {
    println!("{name} loadings:");
    let width = header.iter().map(String::len).max().unwrap_or(0).max(8);
    for (i, row) in r.loadings.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.3}")).collect();
        println!("  {:<width$} {}", header[i], cells.join(" "));
    }
    if !is_identity(&r.factor_correlations) {
        println!("factor correlations:");
        for row in r.factor_correlations.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>8.3}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
}

fn is_identity(a: &Array2<f64>) -> bool {
    a.indexed_iter().all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 })
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn cmd_experiment(a: ExperimentArgs, timing: bool) -> Result<(), Failure> {
    let mut text = std::fs::read_to_string(&a.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.config.display())))?;
    text.push('\n');
    for o in &a.overrides {
        if !o.contains('=') {
            return Err(Failure::Usage(format!("override '{o}' is not key=value")));
        }
        text.push_str(o);
        text.push('\n');
    }
    if let Some(seed) = a.seed {
        text.push_str(&format!("seed = {seed}\n"));
    }
    let config = parse_config(&text).map_err(usage_or_numeric)?;
    match (config, timing) {
        (ExperimentConfig::Accuracy { grid, fit }, false) => {
            let rows = run_accuracy_experiment(&grid, &fit).context("simulation failed")?;
            let mut out = create(&a.output)?;
            write_accuracy_csv(&rows, &mut out).context("writing results")?;
            out.flush().context("writing results")?;
            if let Some(path) = &a.summary_output {
                let mut out = create(path)?;
                write_accuracy_plot_csv(&rows, &mut out).context("writing plot data")?;
                out.flush().context("writing plot data")?;
            }
            for r in &rows {
                println!(
                    "{} common={} N={} q={}: sqrtMSE {:.4}, sqrtBIAS {:.4} ({} fits, {} failed)",
                    r.mechanism,
                    if r.common { "yes" } else { "no" },
                    r.n,
                    r.q,
                    r.sqrt_mse,
                    r.sqrt_bias,
                    r.replications,
                    r.failures
                );
            }
        }
        (ExperimentConfig::Timing { grid, fit }, true) => {
            let rows = run_timing_experiment(&grid, &fit).context("benchmark failed")?;
            let mut out = create(&a.output)?;
            write_timing_csv(&rows, &mut out).context("writing results")?;
            out.flush().context("writing results")?;
            let baseline_alg =
                if grid.algorithms.contains(&Algorithm::QuasiNewton) { Algorithm::QuasiNewton } else { grid.algorithms[0] };
            let summary = summarize_timing(&rows, (grid.qs[0], baseline_alg)).context("summarizing")?;
            if let Some(path) = &a.summary_output {
                let mut out = create(path)?;
                write_timing_summary_csv(&summary, &mut out).context("writing summary")?;
                out.flush().context("writing summary")?;
            }
            for &q in &grid.qs {
                println!("q = {q}:");
                for s in summary.iter().filter(|s| s.q == q) {
                    println!("  {}: {:.2} seconds ({:.0} iterations)", s.algorithm.label(), s.mean_seconds, s.mean_iterations);
                }
            }
        }
        (_, true) => return Err(Failure::Usage("benchmark needs 'experiment = timing'".into())),
        (_, false) => return Err(Failure::Usage("simulate needs 'experiment = accuracy'".into())),
    }
    Ok(())
}
