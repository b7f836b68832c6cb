use crate::types::SatId;
use thiserror::Error;

/// Errors produced across the positioning toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("duplicate satellite {0} in epoch")]
    DuplicateSatellite(SatId),
    #[error("field {field} out of range: {value}")]
    FieldOutOfRange { field: &'static str, value: f64 },
    #[error("position too close to the earth center ({0} m)")]
    NearEarthCenter(f64),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("missing Doppler measurement for {0}")]
    MissingDoppler(SatId),
    #[error("missing carrier phase measurement for {0}")]
    MissingCarrierPhase(SatId),
    #[error("insufficient satellites: need {needed}, have {available}")]
    InsufficientSatellites { needed: usize, available: usize },
    #[error("no ambiguity state for {0}")]
    MissingAmbiguity(SatId),
    #[error("insufficient common satellites between rover and base")]
    InsufficientCommonSatellites,
    #[error("singular geometry (condition number {0:e})")]
    SingularGeometry(f64),
    #[error("singular linear system")]
    SingularSystem,
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("invalid elevation angle {0} rad")]
    InvalidElevation(f64),
    #[error("rover epoch t={rover} and base epoch t={base} are not time-matched")]
    EpochMismatch { rover: f64, base: f64 },
    #[error("filter is not initialized")]
    NotInitialized,
    #[error("epoch t={t} precedes last filter update t={t_last}")]
    TimeReversal { t: f64, t_last: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("gap of {gap} s between epochs exceeds max_gap {max_gap} s")]
    GapTooLarge { gap: f64, max_gap: f64 },
    #[error("node {0} has not been initialized")]
    UninitializedNode(usize),
    #[error("node {0} is fixed")]
    FixedNode(usize),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("factor graph is disconnected")]
    DisconnectedGraph,
    #[error("factor references nodes that are not adjacent in the chain")]
    NonChainFactor,
    #[error("ambiguity dimension {0} exceeds the supported maximum")]
    DimensionTooLarge(usize),
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}, column {column}: {reason}")]
    ParseError {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: u32 },
    #[error("no overlap between solutions and ground truth")]
    NoOverlap,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
