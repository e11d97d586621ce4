// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Every variant maps to a stable machine-readable `kind` string so the CLI
/// can emit structured errors.
#[derive(Debug, Error)]
pub enum SgvaError {
    #[error("format error: {0}")]
    Format(String),

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unknown key: {0}")]
    Key(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite numerics: {0}")]
    Numerics(String),

    #[error("config error: {0}")]
    Config(String),
}

impl SgvaError {
    pub fn kind(&self) -> &'static str {
        match self {
            SgvaError::Format(_) => "FormatError",
            SgvaError::Validation { .. } => "ValidationError",
            SgvaError::Io(_) => "IoError",
            SgvaError::Sampling(_) => "SamplingError",
            SgvaError::Key(_) => "KeyError",
            SgvaError::Shape { .. } => "ShapeError",
            SgvaError::DegenerateFeature(_) => "DegenerateFeatureError",
            SgvaError::Contract(_) => "ContractError",
            SgvaError::Numerics(_) => "NumericsError",
            SgvaError::Config(_) => "ConfigError",
        }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        SgvaError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        SgvaError::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T, E = SgvaError> = std::result::Result<T, E>;
