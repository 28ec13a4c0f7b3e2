use thiserror::Error;

/// Errors produced anywhere in the localization pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Configuration could not be parsed or violates an invariant. `field` is a
    /// dotted path into the JSON document.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// A scalar argument is outside the domain of a model function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two nodes on an active measurement row coincide.
    #[error("degenerate geometry: {what} are {distance:.3e} m apart")]
    DegenerateGeometry { what: String, distance: f64 },

    /// The weighted normal matrix is singular or too badly conditioned to solve.
    #[error("singular normal matrix (condition number {condition:.3e})")]
    Singular { condition: f64 },

    /// A Gauss-Newton iterate left the safety box around the scenario.
    #[error("estimate diverged at iteration {iteration}: ({x:.1}, {y:.1}) outside safety box")]
    Divergence { iteration: usize, x: f64, y: f64 },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
