//! Harness errors, partitioned by exit code: configuration problems exit
//! with 2, data/file problems with 3, numerical aborts with 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort at step {step}: {detail}")]
    Numerical { step: usize, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical { .. } => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &PathBuf, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<ilctc_core::codec::CodecError> for CliError {
    fn from(e: ilctc_core::codec::CodecError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ilctc_core::synth::SynthError> for CliError {
    fn from(e: ilctc_core::synth::SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ilctc_core::model::ModelError> for CliError {
    fn from(e: ilctc_core::model::ModelError) -> Self {
        match e {
            ilctc_core::model::ModelError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ilctc_core::losses::LossError> for CliError {
    fn from(e: ilctc_core::losses::LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ilctc_core::optim::OptimError> for CliError {
    fn from(e: ilctc_core::optim::OptimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ilctc_core::decode::MetricsError> for CliError {
    fn from(e: ilctc_core::decode::MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}
