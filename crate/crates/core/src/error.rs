use std::fmt;

use thiserror::Error;

/// Identifies a station in a layout (zero-based index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Station {
    Transmitter(usize),
    Receiver(usize),
}

impl fmt::Display for Station {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Station::Transmitter(m) => write!(f, "transmitter {}", m + 1),
            Station::Receiver(n) => write!(f, "receiver {}", n + 1),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("target is colocated with {station} (distance {distance_m:e} m)")]
    Colocated { station: Station, distance_m: f64 },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{matrix} is not positive definite{hint}")]
    NotPositiveDefinite { matrix: &'static str, hint: &'static str },

    #[error("mismatch too severe for the importance-weighted bound: 2*C0^-1 - C1^-1 is not positive definite")]
    MismatchUnstable,

    #[error("{failed} of {total} bit draws produced a singular information matrix")]
    TooManySingularDraws { failed: usize, total: usize },

    #[error("every candidate in the search grid was rejected")]
    EmptySearch,

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { message: String, line: Option<usize> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
