use thiserror::Error;

/// Errors raised by the analysis and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Parameters or inputs that violate a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// A closed-form result is requested outside the hypotheses it was derived under.
    #[error("domain error: {0}")]
    Domain(String),

    /// A transfer function was evaluated on (or numerically at) one of its poles.
    #[error("pole of {what} at s = {re} + {im}j")]
    Pole { what: &'static str, re: f64, im: f64 },

    /// The integrator produced a non-finite state.
    #[error("integration fault at t = {t} s: {detail}")]
    Integration { t: f64, detail: String },

    /// Malformed speed-profile data. `row` is 1-based and counts the header as row 1.
    #[error("{path}: row {row}: {detail}")]
    Parse { path: String, row: usize, detail: String },

    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
