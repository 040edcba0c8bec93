use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("layer {layer}: operator sets do not cover the layer ({msg})")]
    Coverage { layer: usize, msg: String },

    #[error("fragment: {0}")]
    Fragment(String),

    #[error("non-finite value entering layer {0}")]
    NonFinite(usize),

    #[error("search space of {0} plans exceeds the exhaustive limit")]
    SearchSpace(u128),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("peer reported error: {0}")]
    Peer(String),

    #[error("inference {id}: {msg}")]
    Inference { id: u32, msg: String },

    #[error("timed out: {0}")]
    Timeout(String),

    #[error("trace exhausted: {0}")]
    TraceExhausted(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("network: {0}")]
    Network(#[source] io::Error),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 usage/input, 3 network, 4 internal invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Network(_)
            | Error::Protocol(_)
            | Error::Peer(_)
            | Error::Inference { .. }
            | Error::Timeout(_) => 3,
            Error::Invariant(_) => 4,
            _ => 2,
        }
    }
}
