use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { pos: usize, name: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid vector field: {0}")]
    InvalidField(String),

    #[error("bracket `{word}` exceeds the expression size cap ({nodes} > {cap} nodes)")]
    BlowUp { word: String, nodes: usize, cap: usize },

    #[error("state-space violation: {0}")]
    Domain(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("phase {phase} exceeded its hard cap of {cap} ms before its stop rule was met")]
    PhaseCap { phase: String, cap: f64 },

    #[error("trajectory left the state space at t = {t}: {reason}")]
    StateSpaceExit { t: f64, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("simulation failed in replica {replica}: {source}")]
    Replica {
        replica: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
