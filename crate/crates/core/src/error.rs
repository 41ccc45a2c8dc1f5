use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A covariance block is singular or not positive definite.
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    /// An edge covariance could not be inverted into an information matrix.
    #[error("degenerate information on edge {edge}: {reason}")]
    DegenerateInformation { edge: usize, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("EM collapse: component {component} of a {components}-component mixture lost its weight twice")]
    EmCollapse { component: usize, components: usize },

    #[error("{source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(source_name: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            msg: msg.into(),
        }
    }
}
