use ndarray::Array2;

use crate::error::{FimlError, Result};

/// Root mean squared error and root squared bias of loading estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub sqrt_mse: f64,
    pub sqrt_bias: f64,
    /// Number of loading entries averaged over.
    pub r: usize,
    pub replications: usize,
}

/// Compares estimates with `truth` over rows `first_row..p`. When `restricted`,
/// entries `λᵢⱼ` with `j > i` are fixed and left out of the average.
pub fn sqrt_metrics(estimates: &[Array2<f64>], truth: &Array2<f64>, first_row: usize, restricted: bool) -> Result<MetricReport> {
    if estimates.is_empty() {
        return Err(FimlError::NoEstimates);
    }
    let (p, m) = truth.dim();
    if estimates.iter().any(|e| e.dim() != (p, m)) {
        return Err(FimlError::Dimension("estimate shape differs from the truth".into()));
    }
    let cells: Vec<(usize, usize)> = (first_row..p)
        .flat_map(|i| (0..m).filter(move |&j| !restricted || j <= i).map(move |j| (i, j)))
        .collect();
    if cells.is_empty() {
        return Err(FimlError::Dimension("no loading entries to compare".into()));
    }
    let s = estimates.len() as f64;
    let r = cells.len();
    let mut mse = 0.0;
    let mut bias = 0.0;
    for &(i, j) in &cells {
        let t = truth[[i, j]];
        let mut mean = 0.0;
        for e in estimates {
            let d = e[[i, j]] - t;
            mse += d * d;
            mean += e[[i, j]];
        }
        let b = mean / s - t;
        bias += b * b;
    }
    Ok(MetricReport {
        sqrt_mse: (mse / (s * r as f64)).sqrt(),
        sqrt_bias: (bias / r as f64).sqrt(),
        r,
        replications: estimates.len(),
    })
}
