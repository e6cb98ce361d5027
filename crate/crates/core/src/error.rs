use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("length mismatch: header expects {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero variance: cannot normalize a constant volume")]
    ZeroVariance,

    #[error("shape does not fit volume: {0}")]
    ShapeDoesNotFit(String),

    #[error("degenerate face {face} (zero area)")]
    DegenerateFace { face: usize },

    #[error("mesh is not a closed genus-0 surface: {0}")]
    InvalidMesh(String),

    #[error("spherical map has {count} flipped triangles after {iterations} iterations")]
    FlippedTriangles { count: usize, iterations: usize },

    #[error("no spherical triangle contains point [{}, {}, {}]", point[0], point[1], point[2])]
    PointNotLocated { point: [f64; 3] },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no valid columns in ground truth")]
    NoValidColumns,

    #[error("empty point set")]
    EmptyPointSet,

    #[error("fit diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header(_) => "header",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Parse { .. } => "parse",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::ZeroVariance => "zero_variance",
            Error::ShapeDoesNotFit(_) => "shape_does_not_fit",
            Error::DegenerateFace { .. } => "degenerate_face",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::FlippedTriangles { .. } => "flipped_triangles",
            Error::PointNotLocated { .. } => "point_not_located",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::NoValidColumns => "no_valid_columns",
            Error::EmptyPointSet => "empty_point_set",
            Error::Diverged { .. } => "diverged",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
        }
    }
}
