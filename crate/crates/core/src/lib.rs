pub mod error;
mod eigen;
pub mod sparse;

pub use eigen::SolverOptions;
pub use error::{Error, Result};
pub mod spectral;
pub mod partition;
pub mod admm;
pub mod model;
pub mod eval;
pub mod diagnostics;
pub mod pipeline;
