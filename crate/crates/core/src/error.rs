use thiserror::Error;

/// Errors raised anywhere in the reachability toolkit.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("singularity in {model} dynamics: {term} is not finite")]
    Singularity { model: &'static str, term: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integration diverged: exceeded {max_steps} internal steps before t = {t}")]
    Divergence { t: f64, max_steps: usize },

    #[error("state blew up after t = {t}: {cause}")]
    BlowUp { t: f64, cause: String },

    #[error("unknown model '{name}' (registered: {registered})")]
    UnknownModel { name: String, registered: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("model schema mismatch: {0}")]
    Schema(String),

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("no feasible threshold: {0}")]
    Infeasible(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singularity { .. }
                | Error::Divergence { .. }
                | Error::BlowUp { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
