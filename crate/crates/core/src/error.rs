use std::path::PathBuf;

use crate::trilevel::TraceRow;
use crate::wardrop::FlowAssignment;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument lies outside the domain of the function (negative flow, negative price scale...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's contract (infeasible flow, mismatched price/decision).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("invalid configuration key `{key}`: {message}")]
    Schema { key: String, message: String },

    #[error("wardrop solver did not converge: gap {gap:.3e} > tol {tol:.3e} after {iterations} sweeps")]
    WardropNotConverged {
        gap: f64,
        tol: f64,
        iterations: usize,
        best: Box<FlowAssignment>,
    },

    #[error("power flow did not converge after {iterations} iterations (last mismatch {last:.3e} pu)")]
    PowerFlowNotConverged { iterations: usize, last: f64, trace: Vec<f64> },

    #[error("voltage collapse at bus {bus}: |U| = {magnitude:.4} pu")]
    VoltageCollapse { bus: usize, magnitude: f64 },

    #[error("no feasible alpha found after {draws} draws around {center:.4e}; try a larger spread")]
    FeasibilityRedraw { draws: usize, center: f64 },

    #[error("outer loop exceeded {iterations} iterations without meeting the stopping rule")]
    OuterIterationCap { iterations: usize, trace: Vec<TraceRow> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
