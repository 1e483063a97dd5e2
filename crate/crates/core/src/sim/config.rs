//! Plain-text experiment definitions.
//!
//! One `key = value` per line, `#` starts a comment, later lines override
//! earlier ones. Lists are comma separated; integer lists also accept
//! `range(start, stop, step)` (inclusive) and `logspace(lo, hi, k)` (k
//! integers evenly spaced on the log scale, in decreasing order).
//!
//! ```text
//! experiment = accuracy
//! n = logspace(200, 40000, 20)
//! q = 0, 70, 80
//! mechanism = mcar
//! common = yes, no
//! replications = 100
//! ```

use std::str::FromStr;

use crate::em::{Algorithm, FitConfig};
use crate::error::{FimlError, Result};

use super::{AccuracyGrid, Mechanism, TimingGrid};

#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentConfig {
    Accuracy { grid: AccuracyGrid, fit: FitConfig },
    Timing { grid: TimingGrid, fit: FitConfig },
}

const KEYS: &[&str] = &[
    "experiment", "n", "q", "mechanism", "common", "replications", "runs", "seed", "tol", "max_iter", "starts",
    "algorithms", "nmar_slope", "blocks", "factors", "loading", "n_common",
];

fn bad(key: &str, value: &str) -> FimlError {
    FimlError::Config(format!("invalid value for '{key}': '{value}'"))
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn call_args<'a>(value: &'a str, name: &str) -> Option<Vec<&'a str>> {
    let inner = value.trim().strip_prefix(name)?.trim_start().strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.split(',').map(str::trim).collect())
}

/// `k` integers from `hi` down to `lo`, evenly spaced in `ln`.
pub fn logspace(lo: usize, hi: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![hi];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    (0..k).map(|i| (b + (a - b) * i as f64 / (k - 1) as f64).exp().round() as usize).collect()
}

fn int_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if let Some(args) = call_args(value, "range") {
        let v: Vec<usize> = args.iter().map(|a| scalar(key, a)).collect::<Result<_>>()?;
        let [a, b, s] = v[..] else { return Err(bad(key, value)) };
        if s == 0 {
            return Err(bad(key, value));
        }
        return Ok((a..=b).step_by(s).collect());
    }
    if let Some(args) = call_args(value, "logspace") {
        let v: Vec<usize> = args.iter().map(|a| scalar(key, a)).collect::<Result<_>>()?;
        let [lo, hi, k] = v[..] else { return Err(bad(key, value)) };
        if lo == 0 || hi < lo {
            return Err(bad(key, value));
        }
        return Ok(logspace(lo, hi, k));
    }
    list(value, |s| scalar(key, s))
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn yes_no(key: &str, s: &str) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "yes" | "true" | "on" => Ok(true),
        "no" | "false" | "off" => Ok(false),
        _ => Err(bad(key, s)),
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FimlError::Config(format!("line {}: expected key = value", no + 1)))?;
        let k = k.trim().to_ascii_lowercase().replace('-', "_");
        if !KEYS.contains(&k.as_str()) {
            return Err(FimlError::Config(format!("line {}: unknown key '{k}'", no + 1)));
        }
        entries.retain(|(e, _)| *e != k);
        entries.push((k, v.trim().to_string()));
    }
    let kind = entries.iter().find(|(k, _)| k == "experiment").map(|(_, v)| v.to_ascii_lowercase());
    let mut fit = FitConfig { restrict: true, ..FitConfig::default() };
    let mut acc = AccuracyGrid::default();
    let mut tim = TimingGrid::default();
    let timing = match kind.as_deref() {
        Some("accuracy") | None => false,
        Some("timing") => true,
        Some(other) => return Err(bad("experiment", other)),
    };
    for (k, v) in &entries {
        let v = v.as_str();
        match k.as_str() {
            "experiment" => {}
            "n" if timing => tim.n = scalar(k, v)?,
            "n" => acc.ns = int_list(k, v)?,
            "q" => {
                acc.qs = int_list(k, v)?;
                tim.qs = acc.qs.clone();
            }
            "mechanism" if !timing => acc.mechanisms = list(v, |s| s.parse::<Mechanism>())?,
            "common" if !timing => acc.common_arms = list(v, |s| yes_no(k, s))?,
            "replications" if !timing => acc.replications = scalar(k, v)?,
            "runs" if timing => tim.runs = scalar(k, v)?,
            "seed" => {
                acc.seed = scalar(k, v)?;
                tim.seed = acc.seed;
            }
            "tol" => fit.tol = scalar(k, v)?,
            "max_iter" => fit.max_iter = scalar(k, v)?,
            "starts" => fit.n_starts = scalar(k, v)?,
            "algorithms" if timing => tim.algorithms = list(v, |s| s.parse::<Algorithm>())?,
            "nmar_slope" if !timing => acc.nmar_slope = scalar(k, v)?,
            "blocks" => {
                acc.blocks = scalar(k, v)?;
                tim.blocks = acc.blocks;
            }
            "factors" => {
                acc.factors = scalar(k, v)?;
                tim.factors = acc.factors;
            }
            "loading" => {
                acc.loading = scalar(k, v)?;
                tim.loading = acc.loading;
            }
            "n_common" => {
                acc.n_common = scalar(k, v)?;
                tim.n_common = acc.n_common;
            }
            _ => return Err(FimlError::Config(format!("key '{k}' does not apply to this experiment"))),
        }
    }
    fit.validate()?;
    let empty = |name: &str| Err(FimlError::Config(format!("empty grid: no values for '{name}'")));
    if timing {
        if tim.qs.is_empty() {
            return empty("q");
        }
        if tim.algorithms.is_empty() {
            return empty("algorithms");
        }
        if tim.runs == 0 {
            return empty("runs");
        }
        Ok(ExperimentConfig::Timing { grid: tim, fit })
    } else {
        for (name, e) in [
            ("n", acc.ns.is_empty()),
            ("q", acc.qs.is_empty()),
            ("mechanism", acc.mechanisms.is_empty()),
            ("common", acc.common_arms.is_empty()),
            ("replications", acc.replications == 0),
        ] {
            if e {
                return empty(name);
            }
        }
        Ok(ExperimentConfig::Accuracy { grid: acc, fit })
    }
}
