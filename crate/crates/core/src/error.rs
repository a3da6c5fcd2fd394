use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {lhs:?} vs {rhs:?} ({op})")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("value {value} outside representable range ({context})")]
    Range { value: f32, context: &'static str },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step error: {0}")]
    Step(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("protocol error at offset {offset}: {message}")]
    Protocol { offset: usize, message: String },

    #[error("frame error: {0}")]
    Frame(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn protocol(offset: usize, message: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            message: message.into(),
        }
    }
}
