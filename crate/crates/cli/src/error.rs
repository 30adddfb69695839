use std::path::Path;

use disco::eval::EvalError;
use disco::hypernet::HyperError;
use disco::integrator::IntegratorError;
use disco::operator::OperatorError;
use disco::pdegen::PdeError;
use disco::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload: {0}")]
    Payload(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "CONFIG_INVALID",
            CliError::Io { .. } => "IO",
            CliError::Magic { .. } => "FORMAT_MAGIC",
            CliError::Version { .. } => "FORMAT_VERSION",
            CliError::Header(_) => "FORMAT_HEADER",
            CliError::Payload(_) => "FORMAT_PAYLOAD",
            CliError::Dimension(_) => "DIM_MISMATCH",
            CliError::Numerical(_) => "NUMERIC_FAILURE",
            CliError::Invalid(_) => "INVALID_ARGUMENT",
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Magic { .. } | CliError::Version { .. } | CliError::Header(_) | CliError::Payload(_) => "FORMAT_ERROR",
            CliError::Numerical(_) => "NUMERICAL_ERROR",
            _ => "CONFIG_ERROR",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            "FORMAT_ERROR" => 3,
            "NUMERICAL_ERROR" => 4,
            _ => 2,
        }
    }

    /// Single machine-parsable line: `ERROR code=... class=... message="..."`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("ERROR code={} class={} message=\"{}\"", self.code(), self.class(), msg)
    }
}

fn integrator(e: &IntegratorError) -> Option<CliError> {
    match e {
        IntegratorError::NonFinite { .. } | IntegratorError::RejectLimit { .. } => Some(CliError::Numerical(e.to_string())),
        _ => None,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Integrator(i) => integrator(i).unwrap_or_else(|| CliError::Invalid(e.to_string())),
            TrainError::Shape(_) | TrainError::Operator(OperatorError::Divisibility { .. }) => CliError::Dimension(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<PdeError> for CliError {
    fn from(e: PdeError) -> Self {
        match e {
            PdeError::NonFinite(_) => CliError::Numerical(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<HyperError> for CliError {
    fn from(e: HyperError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        CliError::from(TrainError::from(e))
    }
}
