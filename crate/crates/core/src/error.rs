use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("requested {requested} eigenpairs from a spectrum of size {available}")]
    CountTooLarge { requested: usize, available: usize },
    #[error("eigen-decomposition did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("missing pair ({0}, {1})")]
    MissingPair(usize, usize),
    #[error("pair weights differ: w[{k}][{l}] = {forward}, w[{l}][{k}] = {backward}")]
    WeightMismatch {
        k: usize,
        l: usize,
        forward: f64,
        backward: f64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label arrays differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("pair graph with non-zero weights is disconnected")]
    DisconnectedGraph,
    #[error("relative segmentation ({0}, {1}) is all zero")]
    AllZero(usize, usize),
    #[error("leading eigenvalue {value:e} is negative (largest is {largest:e})")]
    NegativeLeadingEigenvalue { value: f64, largest: f64 },
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("no positive weight in fit")]
    ZeroWeight,
    #[error("degenerate point configuration (weighted covariance rank < 2)")]
    DegenerateConfiguration,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of the numerical stages (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::NotSymmetric { .. }
                | Error::NoConvergence(_)
                | Error::DisconnectedGraph
                | Error::AllZero(..)
                | Error::NegativeLeadingEigenvalue { .. }
                | Error::ZeroWeight
                | Error::DegenerateConfiguration
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
