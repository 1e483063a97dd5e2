//! CSV data input and the plain-text model file.
//!
//! A model file looks like
//!
//! ```text
//! p = 2
//! m = 1
//! restricted = true
//! algorithm = modified-em
//! loglik = -2.5e2
//! iterations = 14
//! [mu]
//! 0e0 1.5e-1
//! [lambda]
//! 8e-1
//! 7.5e-1
//! [psi]
//! 3.6e-1 4e-1
//! ```
//!
//! Numbers are written in the shortest form that parses back to the same
//! value, so a write/read round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::data::ObservedDataset;
use crate::em::{Algorithm, FitResult};
use crate::error::{FimlError, Result};
use crate::model::FactorModel;
use crate::scalar::Scalar;

pub const DEFAULT_MISSING: &[&str] = &["", "NA"];

/// A dataset read from CSV together with its column names.
#[derive(Debug, Clone)]
pub struct CsvData<T> {
    pub header: Vec<String>,
    pub data: ObservedDataset<T>,
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, missing_tokens: &[&str]) -> Result<CsvData<T>> {
    read_csv(std::fs::File::open(path)?, missing_tokens)
}

/// Parses CSV with a header row. Cells equal (after trimming) to one of
/// `missing_tokens` are missing; every other cell must be a number.
pub fn read_csv<T: Scalar, R: Read>(input: R, missing_tokens: &[&str]) -> Result<CsvData<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let p = header.len();
    if p == 0 || (p == 1 && header[0].is_empty()) {
        return Err(FimlError::Parse("no columns in header".into()));
    }
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut empty_rows = Vec::new();
    let mut n = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = rec.position().map_or(k + 2, |pos| pos.line() as usize);
        if rec.len() != p {
            return Err(FimlError::Parse(format!("line {line}: expected {p} fields, found {}", rec.len())));
        }
        let mut any = false;
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if missing_tokens.contains(&cell) {
                values.push(T::zero());
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    FimlError::Parse(format!("line {line}, column '{}': '{cell}' is not a number", header[j]))
                })?;
                if !v.is_finite() {
                    return Err(FimlError::Parse(format!("line {line}, column '{}': non-finite value", header[j])));
                }
                values.push(T::lit(v));
                mask.push(true);
                any = true;
            }
        }
        if !any {
            empty_rows.push(line);
        }
        n += 1;
    }
    if !empty_rows.is_empty() {
        return Err(FimlError::EmptyCases(empty_rows));
    }
    if n == 0 {
        return Err(FimlError::EmptyDataset);
    }
    let values = Array2::from_shape_vec((n, p), values).expect("row lengths checked");
    let mask = Array2::from_shape_vec((n, p), mask).expect("row lengths checked");
    Ok(CsvData { header, data: ObservedDataset::new(values, mask)? })
}

/// Writes `data` with missing cells left empty.
pub fn write_csv<T: Scalar, W: Write>(data: &ObservedDataset<T>, header: &[String], out: W) -> Result<()> {
    if header.len() != data.p() {
        return Err(FimlError::Dimension(format!("{} names for {} columns", header.len(), data.p())));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (vals, obs) in data.values().rows().into_iter().zip(data.mask().rows()) {
        w.write_record(vals.iter().zip(obs.iter()).map(|(v, &o)| if o { format!("{v:e}") } else { String::new() }))?;
    }
    w.flush()?;
    Ok(())
}

/// A fitted model with the header fields stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile<T> {
    pub model: FactorModel<T>,
    pub restricted: bool,
    pub algorithm: Option<Algorithm>,
    pub loglik: Option<T>,
    pub iterations: Option<usize>,
}

impl<T: Scalar> ModelFile<T> {
    pub fn from_fit(fit: &FitResult<T>, restricted: bool) -> Self {
        Self {
            model: fit.model.clone(),
            restricted,
            algorithm: Some(fit.algorithm),
            loglik: Some(fit.loglik),
            iterations: Some(fit.iterations),
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let m = &self.model;
        writeln!(out, "p = {}", m.p())?;
        writeln!(out, "m = {}", m.m())?;
        writeln!(out, "restricted = {}", self.restricted)?;
        if let Some(a) = self.algorithm {
            writeln!(out, "algorithm = {}", a.name())?;
        }
        if let Some(l) = self.loglik {
            writeln!(out, "loglik = {l:e}")?;
        }
        if let Some(k) = self.iterations {
            writeln!(out, "iterations = {k}")?;
        }
        let join = |it: &mut dyn Iterator<Item = &T>| it.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "[mu]\n{}", join(&mut m.mu().iter()))?;
        writeln!(out, "[lambda]")?;
        for row in m.lambda().rows() {
            writeln!(out, "{}", join(&mut row.iter()))?;
        }
        writeln!(out, "[psi]\n{}", join(&mut m.psi().iter()))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |msg: String| FimlError::Parse(msg);
        let num = |s: &str| -> Result<T> {
            s.parse::<f64>().map(T::lit).map_err(|_| err(format!("'{s}' is not a number")))
        };
        let (mut p, mut m) = (None, None);
        let mut restricted = false;
        let (mut algorithm, mut loglik, mut iterations) = (None, None, None);
        let mut section: Option<&str> = None;
        let (mut mu, mut lambda, mut psi) = (Vec::new(), Vec::new(), Vec::new());
        let mut lambda_rows = 0;
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !matches!(name, "mu" | "lambda" | "psi") {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name);
                continue;
            }
            match section {
                None => {
                    let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value: '{line}'")))?;
                    let v = v.trim();
                    let bad = || err(format!("invalid value for '{}': '{v}'", k.trim()));
                    match k.trim() {
                        "p" => p = Some(v.parse::<usize>().map_err(|_| bad())?),
                        "m" => m = Some(v.parse::<usize>().map_err(|_| bad())?),
                        "restricted" => restricted = v.parse::<bool>().map_err(|_| bad())?,
                        "algorithm" => algorithm = Some(v.parse::<Algorithm>().map_err(|_| bad())?),
                        "loglik" => loglik = Some(num(v)?),
                        "iterations" => iterations = Some(v.parse::<usize>().map_err(|_| bad())?),
                        other => return Err(err(format!("unknown header field '{other}'"))),
                    }
                }
                Some(s) => {
                    let vals = line.split_whitespace().map(num).collect::<Result<Vec<T>>>()?;
                    match s {
                        "mu" => mu.extend(vals),
                        "psi" => psi.extend(vals),
                        _ => {
                            lambda_rows += 1;
                            lambda.extend(vals);
                        }
                    }
                }
            }
        }
        let p = p.ok_or_else(|| err("missing field 'p'".into()))?;
        let m = m.ok_or_else(|| err("missing field 'm'".into()))?;
        if mu.len() != p || psi.len() != p || lambda.len() != p * m || lambda_rows != p {
            return Err(FimlError::Dimension(format!(
                "model file declares p = {p}, m = {m} but holds {} means, {} loadings and {} unique variances",
                mu.len(),
                lambda.len(),
                psi.len()
            )));
        }
        let lambda = Array2::from_shape_vec((p, m), lambda).expect("length checked");
        let model = FactorModel::new(Array1::from_vec(mu), lambda, Array1::from_vec(psi))?;
        if restricted && !model.satisfies_restriction() {
            return Err(FimlError::InvalidModel("flagged restricted but loadings violate the restriction".into()));
        }
        Ok(Self { model, restricted, algorithm, loglik, iterations })
    }
}
