use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no points survived voxel downsampling and frustum filtering")]
    EmptyInitialization,

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite {attribute} on gaussian {index}")]
    NonFiniteAttribute { attribute: &'static str, index: usize },

    #[error("non-finite loss term `{term}`{}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFiniteLoss {
        term: &'static str,
        iteration: Option<usize>,
    },

    #[error("failed to load {}{}: {message}", path.display(), record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Load {
        path: PathBuf,
        record: Option<usize>,
        message: String,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidParameter(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, record: Option<usize>, msg: impl Into<String>) -> Self {
        Self::Load {
            path: path.into(),
            record,
            message: msg.into(),
        }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::InvalidParameter(_)
                | Self::Load { .. }
                | Self::Format(_)
                | Self::Config(_)
                | Self::Json(_)
                | Self::EmptyInitialization
        )
    }
}
