//! Monte Carlo machinery: designs, missingness mechanisms, accuracy metrics
//! and the accuracy / timing experiment drivers.

pub mod config;
pub mod experiment;
mod generate;
mod metrics;

pub use config::{parse_config, ExperimentConfig};
pub use experiment::{
    run_accuracy_experiment, run_timing_experiment, summarize_timing, write_accuracy_csv, write_accuracy_plot_csv,
    write_timing_csv, write_timing_summary_csv, AccuracyGrid, AccuracyRow, TimingGrid, TimingRow, TimingSummary,
};
pub use generate::{apply_mcar, apply_nmar, calibrate_nmar_alpha, gen_complete_data, logistic, NmarParams, SimData};
pub use metrics::{sqrt_metrics, MetricReport};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::error::{FimlError, Result};
use crate::model::FactorModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mechanism {
    Mcar,
    Nmar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Nmar => "nmar",
        })
    }
}

impl FromStr for Mechanism {
    type Err = FimlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "nmar" | "mnar" => Ok(Mechanism::Nmar),
            other => Err(FimlError::Config(format!("unknown mechanism '{other}'"))),
        }
    }
}

/// Population model and missingness settings of one simulation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    /// True loadings, `p x m`.
    pub loadings: Array2<f64>,
    /// True unique variances; by default `diag(I − ΛΛᵀ)`.
    pub psi: Array1<f64>,
    pub n: usize,
    /// Variables removed per case (MCAR) or targeted per case on average (NMAR).
    pub q: usize,
    /// Leading variables that are never missing.
    pub n_common: usize,
    pub mechanism: Mechanism,
    /// Slope of the NMAR logistic in `λᵢᵀfₙ`.
    pub nmar_slope: f64,
}

/// Loadings made of `blocks` stacked copies of `loading · I_m`.
pub fn block_loadings(blocks: usize, m: usize, loading: f64) -> Array2<f64> {
    Array2::from_shape_fn((blocks * m, m), |(i, j)| if i % m == j { loading } else { 0.0 })
}

impl SimDesign {
    /// `blocks` stacked `loading · I_m` with `Ψ = diag(I − ΛΛᵀ)`.
    pub fn blocks(
        blocks: usize,
        m: usize,
        loading: f64,
        n_common: usize,
        n: usize,
        q: usize,
        mechanism: Mechanism,
    ) -> Result<Self> {
        let loadings = block_loadings(blocks, m, loading);
        let psi = loadings.map_axis(ndarray::Axis(1), |r| 1.0 - r.dot(&r));
        let d = Self { loadings, psi, n, q, n_common, mechanism, nmar_slope: 1.0 };
        d.validate()?;
        Ok(d)
    }

    /// 90 variables, 3 factors, loadings 0.8, six common measures.
    pub fn standard(n: usize, q: usize, mechanism: Mechanism) -> Result<Self> {
        Self::blocks(30, 3, 0.8, 6, n, q, mechanism)
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn m(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.len() != self.p() {
            return Err(FimlError::Dimension("psi length must equal p".into()));
        }
        if self.n_common > self.p() || self.q > self.p() - self.n_common {
            return Err(FimlError::Config(format!(
                "q = {} exceeds the {} non-common variables",
                self.q,
                self.p() - self.n_common
            )));
        }
        if self.loadings.ncols() == 0 {
            return Err(FimlError::Config("need at least one factor".into()));
        }
        if self.psi.iter().any(|&v| !(v >= 0.0)) {
            return Err(FimlError::Config("unique variances must be non-negative".into()));
        }
        Ok(())
    }

    /// Rate at which non-common cells go missing.
    pub fn missing_rate(&self) -> f64 {
        self.q as f64 / (self.p() - self.n_common) as f64
    }

    /// The generating model (`μ = 0`).
    pub fn true_model<T: Scalar>(&self) -> FactorModel<T> {
        let c = |v: &f64| T::lit(*v);
        FactorModel::from_parts(Array1::zeros(self.p()), self.loadings.map(c), self.psi.map(c))
    }

    /// The design with the common measures removed from the model: the first
    /// `n_common` variables are dropped and every remaining one may go missing.
    pub fn without_common(&self) -> Self {
        let keep: Vec<usize> = (self.n_common..self.p()).collect();
        Self {
            loadings: self.loadings.select(ndarray::Axis(0), &keep),
            psi: self.psi.select(ndarray::Axis(0), &keep),
            n_common: 0,
            ..self.clone()
        }
    }
}
