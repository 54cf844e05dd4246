use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LocError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("cannot decode image {}: {reason}", path.display())]
    CorruptImage { path: PathBuf, reason: String },
    #[error("{}: expected an 8-bit RGB raster, found {color}", path.display())]
    NotRgb { path: PathBuf, color: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{name}`: expected {expected} bytes, blob has {found}")]
    ByteLengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("tensor `{name}`: blob {} is missing", file.display())]
    MissingBlob { name: String, file: PathBuf },
    #[error("unknown checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("degenerate schedule: alpha_bar is 1 at t={0}")]
    ScheduleDegenerate(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("transform `{id}` is not applicable: {reason}")]
    InapplicableTransform { id: String, reason: String },
    #[error("undefined score: {0}")]
    UndefinedScore(String),
    #[error("training diverged at step {step}: {what}")]
    Divergence { step: u64, what: String },
    #[error("dataset {} is empty", .0.display())]
    EmptyDataset(PathBuf),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LocError>;

impl LocError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LocError::Io {
            path: path.into(),
            source,
        }
    }
}
