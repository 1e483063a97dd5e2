//! Full-information maximum likelihood (FIML) factor analysis for data sets
//! in which most values are missing.
//!
//! Three estimators share one likelihood:
//!
//! * [`em::EmVariant::Modified`]: EM whose complete data holds only the common
//!   factors. Each E-step touches just the observed block of every case.
//! * [`em::EmVariant::Ordinary`]: EM that also imputes the missing values,
//!   costing `O(p²)` per case.
//! * [`quasi_newton`]: BFGS on the observed-data log-likelihood.
//!
//! The numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the common `f64` instantiation.

pub mod data;
pub mod em;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod quasi_newton;
pub mod rotation;
pub mod scalar;
pub mod sim;

pub use data::{build_pattern_index, ObsCounts, ObservedDataset, Pattern};
pub use em::{fit, fit_em, fit_em_from, Algorithm, EmVariant, FactorMoments, FitConfig, FitResult, SufficientStats};
pub use error::{FimlError, Result};
pub use io::{load_csv, ModelFile};
pub use likelihood::{fiml_gradients, fiml_loglik, fiml_loglik_and_gradients, precision_blocks, Gradients, PrecisionBlocks};
pub use model::FactorModel;
pub use rotation::{promax, varimax, RotationResult};
pub use scalar::{Scalar, PSI_FLOOR};

pub type FactorModelF64 = FactorModel<f64>;
pub type FactorModelF32 = FactorModel<f32>;
pub type DatasetF64 = ObservedDataset<f64>;
pub type DatasetF32 = ObservedDataset<f32>;
pub type FitResultF64 = FitResult<f64>;
pub type FitResultF32 = FitResult<f32>;
