use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Where a bad configuration value came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLocation {
    pub key: String,
    pub line: Option<usize>,
}

impl fmt::Display for KeyLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "`{}` (line {})", self.key, line),
            None => write!(f, "`{}`", self.key),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid construction arguments or hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration key with a bad value.
    #[error("configuration error at {location}: {message}")]
    ConfigKey {
        location: KeyLocation,
        message: String,
    },

    /// Vector length did not match the network or table layout.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity showed up in a loss, ratio or gradient.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training diverged; `last_good_step` is the last step whose update
    /// completed cleanly (`None` if it failed on the first step).
    #[error("training diverged at step {step}: {reason} (last good step: {})",
        last_good_step.map(|s| s.to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        step: usize,
        reason: String,
        last_good_step: Option<usize>,
        last_good_policy: Box<crate::approximator::ApproximatorParams>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn key(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::ConfigKey {
            location: KeyLocation {
                key: key.into(),
                line,
            },
            message: message.into(),
        }
    }
}
