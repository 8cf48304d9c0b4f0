use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments whose shapes do not fit together.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("simulation overflow at step {step}")]
    Overflow { step: usize },

    #[error("transform is singular to machine precision")]
    SingularTransform,

    #[error("model is not controllable: numerical rank {rank} < {nx}")]
    Uncontrollable { rank: usize, nx: usize },

    #[error("invalid controllability index selection: {0}")]
    InvalidMu(String),

    #[error("pseudo-state trajectory of the reference worker is not persistently exciting")]
    DegeneratePseudoData,

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("best fit rate undefined: measured output is constant")]
    UndefinedBfr,

    #[error("channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },

    #[error("unstable truth model (spectral radius {radius})")]
    UnstableTruth { radius: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("no surviving seeds: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
