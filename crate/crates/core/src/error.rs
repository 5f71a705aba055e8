use std::path::PathBuf;

/// Everything that can go wrong inside the library.
///
/// Variants are grouped by the stage that raises them so that front ends can
/// map them onto exit codes without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: face with {count} vertices, only triangles are supported")]
    NonTriangleFace {
        path: String,
        line: usize,
        count: usize,
    },

    #[error("face {face} references vertex {index}, but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        vertex_count: usize,
    },

    #[error("face {face} is degenerate (repeated vertex index)")]
    DegenerateFace { face: usize },

    #[error("malformed input ({context}): {message}")]
    Format { context: String, message: String },

    #[error("truncated {context}: expected {expected} more bytes")]
    Truncated { context: String, expected: usize },

    #[error("bad magic in {context}: expected {expected:?}, found {found:?}")]
    BadMagic {
        context: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {context} version {found} (this build reads version {supported})")]
    VersionMismatch {
        context: String,
        found: u32,
        supported: u32,
    },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("vertex {0} is not referenced by any face")]
    UnreferencedVertex(usize),

    #[error(
        "eigensolver did not converge after {iterations} restarts (worst residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("deformation gradient at point {point} is near-singular (det = {det:e})")]
    SingularDeformation { point: usize, det: f64 },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("map direction mismatch: {0}")]
    DirectionMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by unreadable or malformed input files.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Io { .. }
                | Error::NonTriangleFace { .. }
                | Error::IndexOutOfRange { .. }
                | Error::DegenerateFace { .. }
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
        )
    }

    /// True for errors raised by diverging or ill-conditioned numerics.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::NonFinite(_)
                | Error::SingularDeformation { .. }
                | Error::NonFiniteGradient { .. }
        )
    }
}
