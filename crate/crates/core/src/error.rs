use std::path::PathBuf;

use thiserror::Error;

/// A chemistry closure was evaluated outside its physical domain.
///
/// Raised for `c1 <= 0` or a surface concentration outside `(0, c2max)`.
/// Newton line searches treat this as recoverable and halve the step.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{quantity} = {value} outside admissible range{}", element.map(|e| format!(" (element {e})")).unwrap_or_default())]
pub struct DomainError {
    pub quantity: &'static str,
    pub value: f64,
    pub element: Option<usize>,
}

impl DomainError {
    pub fn new(quantity: &'static str, value: f64) -> Self {
        Self {
            quantity,
            value,
            element: None,
        }
    }

    pub fn at_element(mut self, element: usize) -> Self {
        self.element.get_or_insert(element);
        self
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("linear solve failed: {0}")]
    Linear(String),
    #[error("nonlinear solve failed: {0}")]
    Convergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
