use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy the operation's rule.
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    /// NaN or infinity produced or received at an operation boundary.
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Malformed binary payload (checkpoint or embedding file).
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Malformed text input (config or attribute file).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    /// Local training produced a non-finite loss.
    #[error("round {round}, client {client}, iteration {iteration}: non-finite loss")]
    Diverged {
        round: usize,
        client: usize,
        iteration: usize,
    },

    #[error("tensor `{name}`: {detail}")]
    TensorMismatch { name: String, detail: String },

    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
