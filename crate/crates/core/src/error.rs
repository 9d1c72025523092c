use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("subject {subject}: {field}: {reason}")]
    Subject {
        subject: String,
        field: &'static str,
        reason: String,
    },

    #[error("nifti format error: {0}")]
    Format(String),

    #[error("unsupported nifti datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("nifti file truncated: expected {expected} bytes of voxel data, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("too few foreground voxels for a stable mode: {found} < {required}")]
    TooFewVoxels { found: usize, required: usize },

    #[error("degenerate intensity distribution: {0}")]
    Degenerate(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("harmonizer error: {0}")]
    Harmonizer(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("fold {fold} of {strategy} failed: {source}")]
    Fold {
        strategy: String,
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
