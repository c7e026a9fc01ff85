use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("nside must be a positive power of two, got {0}")]
    InvalidNside(u32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("keypoint {index} lies behind the camera (z = {depth})")]
    BehindCamera { index: usize, depth: f64 },

    #[error("heatmap stack has {heatmaps} channels but {keypoints} keypoints were given")]
    ChannelMismatch { heatmaps: usize, keypoints: usize },

    #[error("degenerate scene: {0}")]
    Degenerate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
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

    /// Whether the error stems from invalid user input rather than a failure
    /// while running a valid request.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidNside(_)
                | Error::InvalidArgument(_)
                | Error::Config { .. }
                | Error::Json { .. }
                | Error::ChannelMismatch { .. }
        )
    }
}
