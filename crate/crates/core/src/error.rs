use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid tensor container: {0}")]
    InvalidContainer(String),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("malformed detection log at line {line}: {msg}")]
    MalformedDetection { line: usize, msg: String },
    #[error("invalid detection for frame {frame}: {msg}")]
    InvalidDetection { frame: u64, msg: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-positive depth {depth} at pixel ({u}, {v})")]
    NonPositiveDepth { u: usize, v: usize, depth: f64 },
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("unsolvable alignment: {0}")]
    Unsolvable(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("empty point set")]
    EmptySet,
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("missing bundle field `{0}`")]
    MissingField(String),
    #[error("non-scalar root: shape {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
