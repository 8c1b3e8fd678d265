use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid kinematic tree: {0}")]
    InvalidTree(String),
    #[error("missing named joint `{0}`")]
    MissingJoint(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid camera distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("ray direction is not unit length (norm {0})")]
    NonUnitDirection(f64),
    #[error("joint {0} is behind the camera")]
    BehindCamera(usize),
    #[error("empty catalog: {0}")]
    EmptyCatalog(&'static str),
    #[error("mask selects no joints")]
    EmptyMask,
    #[error("frame {frame} has {found} usable joints, at least {required} required")]
    TooFewJoints {
        frame: usize,
        found: usize,
        required: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
