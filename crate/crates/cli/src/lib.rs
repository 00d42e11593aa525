//! Training harness for incremental learning of CTC models: stage
//! configuration, the teacher-student training loop, multi-stage
//! sequences, hyperparameter sweeps and the per-sample correlation
//! analysis. The `ilctc` binary is a thin wrapper over these modules.

pub mod analyze;
pub mod config;
pub mod error;
pub mod io;
pub mod sequence;
pub mod sweep;
pub mod train;

pub use error::CliError;
