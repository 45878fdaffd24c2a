use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },

    #[error("token has zero range (max == min == {value})")]
    DegenerateRange { value: f64 },

    #[error("dispersion undefined for an all-zero token")]
    UndefinedDispersion,

    #[error("code {code} at position {index} is outside [{lo}, {hi}]")]
    CorruptCode {
        index: usize,
        code: i64,
        lo: i64,
        hi: i64,
    },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("kernel width theta = {theta} violates theta <= step/5 (step = {step})")]
    Separation { theta: f64, step: f64 },

    #[error("quadrature did not converge: achieved {achieved:e}, requested {requested:e}")]
    NonConvergence { achieved: f64, requested: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("dimension {0} is not a power of two")]
    UnsupportedDimension(usize),

    #[error("Cayley step failed at lr = {lr}: singular system, try a smaller learning rate")]
    StepFailure { lr: f64 },

    #[error("training aborted at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no threshold satisfies the stabilization and sparsity conditions ({} grid points)", curve.len())]
    SelectionFailure { curve: Vec<(f64, f64)> },

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub fn config(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Config {
            line,
            message: message.into(),
        }
    }

    /// Process exit code for this error: 2 config, 3 data format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidSpec(_) => 2,
            Error::Format { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
            Error::DimensionMismatch { .. } | Error::CorruptCode { .. } => 3,
            Error::Stage { source, .. } | Error::Training { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
