use thiserror::Error;

#[derive(Debug, Error)]
pub enum FimlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty observation")]
    EmptyObservation,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("rows with no observed values: {}", format_rows(.0))]
    EmptyCases(Vec<usize>),

    #[error("variable {0} is never observed")]
    UnobservedVariable(usize),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("degenerate factor moments")]
    DegenerateMoments,

    #[error("singular normal equations for variable {0}")]
    SingularVariable(usize),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("optimizer diverged: {0}")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all {} starts failed: {}", .0.len(), .0.join("; "))]
    AllStartsFailed(Vec<String>),

    #[error("missing rate {0} is unattainable")]
    Unattainable(f64),

    #[error("retry budget exhausted while redrawing case {0}")]
    RetryBudget(usize),

    #[error("no estimates supplied")]
    NoEstimates,

    #[error("too many failed replications: {failed} of {total}")]
    FailureRate { failed: usize, total: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_rows(rows: &[usize]) -> String {
    let shown: Vec<String> = rows.iter().take(20).map(|r| r.to_string()).collect();
    if rows.len() > 20 {
        format!("{} (and {} more)", shown.join(", "), rows.len() - 20)
    } else {
        shown.join(", ")
    }
}

pub type Result<T> = std::result::Result<T, FimlError>;
