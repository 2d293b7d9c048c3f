use jade_core::data::DataError;
use jade_core::engine::EngineError;
use jade_core::evaluate::EvalError;
use jade_core::simulate::SimulateError;
use thiserror::Error;

/// Failure classes with fixed process exit codes: 2 for usage and
/// configuration problems, 3 for bad input data, 4 for numerical
/// failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) => CliError::Usage(e.to_string()),
            EngineError::Data(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::TooFewTimes(_)
            | SimulateError::NoReplicates
            | SimulateError::MissingSnr
            | SimulateError::BadStep => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::SpanMismatch { .. } | EvalError::ProcessMismatch { .. } => {
                CliError::Data(e.to_string())
            }
            EvalError::BadOrder(_) => CliError::Usage(e.to_string()),
            EvalError::Engine(inner) => inner.into(),
            EvalError::Simulate(inner) => inner.into(),
        }
    }
}
