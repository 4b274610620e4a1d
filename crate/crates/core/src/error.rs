use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("shape inconsistency: {0}")]
    Shape(String),

    #[error("patch misalignment: length {len} is not a multiple of patch length {patch}")]
    PatchMisalignment { len: usize, patch: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty mask: loss is undefined without masked positions")]
    EmptyMask,

    #[error("missing input artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::DimensionMismatch { .. }
            | Error::PatchMisalignment { .. }
            | Error::EmptyMask
            | Error::Json(_) => 2,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Shape(_)
            | Error::MissingArtifact(_)
            | Error::HashMismatch { .. }
            | Error::Io(_) => 3,
            Error::NonFinite(_) | Error::Numerical(_) => 4,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
