use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no interactions in input")]
    IngestEmpty,

    #[error("line {line}: {message}")]
    IngestParse { line: usize, message: String },

    #[error("{axis} {index} has zero degree")]
    DegreeZero { axis: &'static str, index: usize },

    #[error("partition of {size} items needs {required_bytes} bytes, budget is {budget_bytes}")]
    PartitionTooLarge {
        size: usize,
        required_bytes: usize,
        budget_bytes: usize,
    },

    #[error("eigensolver did not converge in {iterations} iterations (best residual {best_residual:e})")]
    SvdNoConverge { iterations: usize, best_residual: f64 },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ADMM diverged at iteration {iteration}: residual {residual:e} (minimum {min_residual:e})")]
    AdmmDiverged {
        iteration: usize,
        residual: f64,
        min_residual: f64,
        log: Vec<f64>,
    },

    #[error("partition blocks do not match the assignment: {0}")]
    AssemblyMismatch(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    ModelVersionError { found: u32, expected: u32 },

    #[error("model file corrupt: {0}")]
    ModelCorrupt(String),

    #[error("no test interactions to evaluate")]
    EvalEmpty,

    #[error("omega undefined for item {item}: it co-occurs with no other item")]
    OmegaUndefined { item: usize },

    #[error("modularity undefined on a graph without edges")]
    ModularityUndefined,

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
