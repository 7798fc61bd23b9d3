//! Error classes and their process exit codes.

use std::path::Path;

use worldkit_core::data::DataError;
use worldkit_core::kg::KgError;
use worldkit_core::sos::SosError;
use worldkit_core::worldgen::WorldGenError;
use worldkit_model::checkpoint::CheckpointError;
use worldkit_model::eval::EvalError;
use worldkit_model::network::ModelError;
use worldkit_model::pretrain::PretrainError;
use worldkit_model::train::TrainError;

use crate::ablate::AblateError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;
pub const EXIT_BUDGET: i32 = 6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Budget(_) => EXIT_BUDGET,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SosError> for CliError {
    fn from(e: SosError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WorldGenError> for CliError {
    fn from(e: WorldGenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(e) => CliError::Other(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Empty => CliError::Data(e.to_string()),
            TrainError::Io(e) => CliError::Other(e.to_string()),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Sos(e) => e.into(),
            PretrainError::Train(e) => e.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AblateError> for CliError {
    fn from(e: AblateError) -> Self {
        match e {
            AblateError::World(e) => e.into(),
            AblateError::Sos(e) => e.into(),
            AblateError::Model(e) => e.into(),
            AblateError::Train(e) => e.into(),
            AblateError::Eval(e) => e.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_have_distinct_codes() {
        let all = [
            CliError::Config(String::new()),
            CliError::Data(String::new()),
            CliError::Numeric(String::new()),
            CliError::Verify(String::new()),
            CliError::Budget(String::new()),
            CliError::Other(String::new()),
        ];
        let codes: std::collections::BTreeSet<i32> = all.iter().map(CliError::exit_code).collect();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&EXIT_OK));
    }

    #[test]
    fn nan_is_numeric() {
        let e: CliError = TrainError::NonFinite { step: 3, what: "loss" }.into();
        assert_eq!(e.exit_code(), EXIT_NUMERIC);
    }
}
