use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: u8, classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("kappa undefined: expected weighted disagreement is zero")]
    UndefinedKappa,

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("training diverged at epoch {epoch} (lr = {lr:e})")]
    Divergence { epoch: usize, lr: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &str, expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::InvalidInput(format!("{what}: expected shape {expected:?}, found {found:?}"))
    }

    /// True for failures caused by arithmetic rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Divergence { .. } | Error::UndefinedKappa | Error::DegenerateModel(_)
        )
    }
}
