use thiserror::Error;

/// Failure modes shared by every module of the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    /// A configuration parameter is outside its admissible range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// An operation received data violating its precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Two geometric inputs coincide where a direction is required.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid_config(msg: impl Into<String>) -> LabError {
    LabError::InvalidConfig(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> LabError {
    LabError::InvalidInput(msg.into())
}
