use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid latent/graph/SCM specification.
    #[error("specification error ({context}): {message}")]
    Spec { context: String, message: String },

    #[error("graph error: {0}")]
    Graph(String),

    /// A caller broke a documented precondition (shape mismatch, bad mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric overflow in `{primitive}`: {detail}")]
    NumericOverflow { primitive: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error in {file} (field `{field}`): {message}")]
    Format {
        file: PathBuf,
        field: String,
        message: String,
    },

    #[error("frozen backbone modified: hash {before} became {after}")]
    FrozenViolation { before: String, after: String },

    #[error("training diverged at step {step}: term `{term}` is {value}")]
    Diverged {
        step: usize,
        term: String,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn spec(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Spec {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub(crate) fn format(
        file: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
