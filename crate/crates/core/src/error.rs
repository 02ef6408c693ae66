use thiserror::Error;

/// Errors surfaced by the core modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("unknown node {0}")]
    UnknownNode(u32),
    #[error("unknown link {0}")]
    UnknownLink(u32),
    #[error("link start and end must differ (node {0})")]
    DegenerateLink(u32),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid route {0}: {1}")]
    InvalidRoute(String, String),
    #[error("trace too short: need at least 2 distinct points, got {0}")]
    TraceTooShort(usize),
    #[error("trace timestamps must be strictly increasing (index {0})")]
    NonMonotoneTimestamps(usize),
    #[error("trace does not close its circuit: final point is {0:.1} m from the start node")]
    OpenCircuit(f64),
    #[error("unknown bus {0}")]
    UnknownBus(String),
    #[error("stale timestamp for bus {bus}: {got} < {have}")]
    StaleTimestamp { bus: String, got: f64, have: f64 },
    #[error("position update for bus {0} matches no link of its route")]
    OffRoute(String),
    #[error("not enough update history for bus {0}")]
    InsufficientHistory(String),
    #[error("no active bus on route {0}")]
    NoActiveBus(String),
    #[error("unknown stop: {0}")]
    UnknownStop(String),
    #[error("ambiguous stop name: {0}")]
    AmbiguousStop(String),
    #[error("no route serves both stops in order")]
    NoCommonRoute,
    #[error("no service on any common route")]
    NoService,
    #[error("load model infeasible: fixed terms alone reach server capacity")]
    Infeasible,
    #[error("no measurements in the reconciliation window")]
    NoData,
    #[error("malformed input: {0}")]
    Parse(String),
}
