//! Error type shared by every module in the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, AieError>;

#[derive(Debug)]
pub enum AieError {
    /// Two arrays fed to an operation do not conform.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A categorical index fell outside its declared cardinality.
    IndexOutOfRange {
        what: String,
        index: usize,
        limit: usize,
    },
    /// A data file could not be parsed; `line` is 1-based.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    Io {
        path: String,
        msg: String,
    },
    Json {
        context: String,
        msg: String,
    },
    /// Semantic configuration problems, all collected before failing.
    InvalidConfig {
        issues: Vec<String>,
    },
    /// A precondition on an operation's inputs was violated.
    InvalidInput {
        msg: String,
    },
    /// The requested metric has no defined value on this input.
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },
    /// Training produced a non-finite quantity; `step` is the last good step.
    Divergence {
        step: u64,
        what: String,
    },
    /// The auction simulator produced an empty log.
    NoExposures {
        auctions: usize,
    },
}

impl fmt::Display for AieError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AieError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            AieError::IndexOutOfRange { what, index, limit } => {
                write!(f, "{what}: index {index} out of range (limit {limit})")
            }
            AieError::Parse { path, line, msg } => {
                write!(f, "{path}:{line}: {msg}")
            }
            AieError::Io { path, msg } => write!(f, "{path}: {msg}"),
            AieError::Json { context, msg } => write!(f, "{context}: {msg}"),
            AieError::InvalidConfig { issues } => {
                write!(f, "invalid config ({} issue(s)):", issues.len())?;
                for issue in issues {
                    write!(f, "\n  - {issue}")?;
                }
                Ok(())
            }
            AieError::InvalidInput { msg } => write!(f, "{msg}"),
            AieError::UndefinedMetric { metric, reason } => {
                write!(f, "{metric} is undefined: {reason}")
            }
            AieError::Divergence { step, what } => {
                write!(f, "divergence at step {step}: {what}")
            }
            AieError::NoExposures { auctions } => {
                write!(
                    f,
                    "no impressions exposed after {auctions} auctions; raise bids or lower \
                     competitor_mu"
                )
            }
        }
    }
}

impl std::error::Error for AieError {}

impl AieError {
    pub fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        AieError::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        AieError::InvalidInput { msg: msg.into() }
    }
}
