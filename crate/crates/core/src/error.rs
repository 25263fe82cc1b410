use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad caller input: unreadable files, violated preconditions.
    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An operation was called before its inputs were prepared.
    #[error("state error: {0}")]
    State(String),

    #[error("backend error ({backend}): {message}")]
    Backend { backend: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invocation failed after {} attempt(s): {last_error}", attempts.len())]
    Invocation {
        attempts: Vec<String>,
        last_error: String,
    },

    #[error("region selection failed: {0}")]
    Selection(String),

    #[error("action inference failed: {0}")]
    Inference(String),

    #[error("grounding error: mark {mark} does not exist on the current screen")]
    Grounding { mark: u32 },

    #[error("device error: {0}")]
    Device(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn backend(backend: impl Into<String>, message: impl ToString) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by an external model, detector or service.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend { .. } | Error::Invocation { .. })
    }
}
