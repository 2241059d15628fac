use mcmixit::checkpoint::CheckpointError;
use mcmixit::model::ModelError;
use mcmixit::synth::SynthError;
use mcmixit::train::TrainError;
use mcmixit::wav::WavError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        Self::Data(format!("{context}: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Self::Numerical(e.to_string()),
            TrainError::InvalidConfig(_) | TrainError::ConfigMismatch(_) => Self::Config(e.to_string()),
            TrainError::Model(ModelError::InvalidConfig(_)) => Self::Config(e.to_string()),
            TrainError::Model(ModelError::TensorMismatch(_)) => Self::Config(e.to_string()),
            TrainError::Synth(SynthError::InvalidConfig(_)) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) | SynthError::UnknownSplit(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<WavError> for CliError {
    fn from(e: WavError) -> Self {
        Self::Data(e.to_string())
    }
}
