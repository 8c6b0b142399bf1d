use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("feedback loop is singular (|1 - AD| = {magnitude:e})")]
    LoopSingularity { magnitude: f64 },

    /// `margin` is the total damping left (R + R_D in ohm, or 1 + g).
    #[error("anti-damping feedback (mode {mode:?}, total damping {margin:e})")]
    AntiDamping { mode: Option<usize>, margin: f64 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("unstable closed loop: eigenvalue {re:e} {im:+e}i")]
    Instability { re: f64, im: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("series too short: {len} samples, need at least {needed}")]
    Length { len: usize, needed: usize },

    #[error("peak detection found {found} peaks, expected {expected}")]
    PeakDetection { found: usize, expected: usize },

    #[error("fit did not converge after {iterations} iterations (residual {residual:e})")]
    FitNonConvergence { iterations: usize, residual: f64 },

    #[error("ill-conditioned calibration: {0}")]
    Conditioning(String),

    #[error("ringdown fit failed: {0}")]
    RingdownFit(String),

    #[error("optimum is unbounded: {0}")]
    UnboundedOptimum(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Parse { .. } | Error::Io { .. } => 1,
            _ => 2,
        }
    }

    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation { .. } => "validation",
            Error::LoopSingularity { .. } => "loop_singularity",
            Error::AntiDamping { .. } => "anti_damping",
            Error::OutOfRange(_) => "out_of_range",
            Error::Instability { .. } => "instability",
            Error::Numerical(_) => "numerical",
            Error::Length { .. } => "length",
            Error::PeakDetection { .. } => "peak_detection",
            Error::FitNonConvergence { .. } => "fit_non_convergence",
            Error::Conditioning(_) => "conditioning",
            Error::RingdownFit(_) => "ringdown_fit",
            Error::UnboundedOptimum(_) => "unbounded_optimum",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}

/// Checks that `value` is finite and strictly positive.
pub(crate) fn ensure_positive(field: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::validation(field, format!("must be finite, got {value}")));
    }
    if value <= 0.0 {
        return Err(Error::validation(field, format!("must be > 0, got {value}")));
    }
    Ok(value)
}

/// Checks that `value` is finite and non-negative.
pub(crate) fn ensure_non_negative(field: &str, value: f64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::validation(field, format!("must be finite, got {value}")));
    }
    if value < 0.0 {
        return Err(Error::validation(field, format!("must be >= 0, got {value}")));
    }
    Ok(value)
}
