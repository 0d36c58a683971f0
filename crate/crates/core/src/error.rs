use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments: dimension mismatches, out-of-range parameters, empty inputs.
    #[error("input error: {0}")]
    Input(String),

    /// A linear-algebra routine could not produce a trustworthy answer.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Gain or metric synthesis failed.
    #[error("synthesis error: {0}")]
    Synthesis(String),

    /// Iterative identification diverged. `trace` holds the loss history up to the failure.
    #[error("optimization error: {message} (after {} iterations)", trace.len())]
    Optimization { message: String, trace: Vec<f64> },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the `ckoop` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Config(_) => 2,
            Error::Numerical(_)
            | Error::Synthesis(_)
            | Error::Optimization { .. }
            | Error::Solver(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}

pub(crate) fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::input(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::input(format!("{what}: non-finite entry at index {i}")));
    }
    Ok(())
}
