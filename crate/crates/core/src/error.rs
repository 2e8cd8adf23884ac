use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// No candidate satisfies the safety constraints. Usually means the
    /// initial safe set is missing or was measured wrong.
    #[error("empty safe set: {0}")]
    EmptySafeSet(String),

    /// Neither minimizers nor expanders exist; the grid driver treats this as convergence.
    #[error("no candidate point: minimizer and expander sets are both empty")]
    NoCandidate,

    #[error("all minimizer sub-problems ended infeasible")]
    EmptyMinimizer,

    #[error("no safe sample among {drawn} initial guesses; increase the sample count or seed the guesses with the current samples")]
    NoSafeSamples { drawn: usize },

    #[error("pattern search start point is infeasible (worst constraint {worst:.3e})")]
    InfeasibleStart { worst: f64 },

    #[error("recommended point violates the surrogate safety constraint by {margin:.3e}")]
    SafetyViolation { margin: f64 },

    #[error("plant error: {0}")]
    Plant(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("record error: {0}")]
    Record(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the error category. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Input(_) => 2,
            Error::Record(_) => 3,
            Error::Io(_) => 4,
            Error::Plant(_) => 5,
            Error::Numerical(_) => 6,
            Error::EmptySafeSet(_)
            | Error::NoCandidate
            | Error::EmptyMinimizer
            | Error::NoSafeSamples { .. }
            | Error::InfeasibleStart { .. }
            | Error::SafetyViolation { .. } => 7,
        }
    }
}
