use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no boundary of 0-chain")]
    NoBoundary,
    #[error("no coboundary of a top-degree chain")]
    NoCoboundary,
    #[error("degree mismatch: expected {expected}, got {got}")]
    DegreeMismatch { expected: usize, got: usize },
    #[error("slice {0} outside the open direction")]
    SliceOutOfRange(usize),
    #[error("complex too large for cycle enumeration ({count} cells, cap {cap})")]
    CycleCap { count: usize, cap: usize },
    #[error("site {0} is already live")]
    DuplicateSite(u64),
    #[error("site {0} is not live")]
    DeadSite(u64),
    #[error("live-site cap {0} exceeded; increase cap or shrink lattice")]
    SiteCap(usize),
    #[error("impossible branch (probability {0:e})")]
    ImpossibleBranch(f64),
    #[error("site {0} is still entangled and cannot be detached")]
    Entangled(u64),
    #[error("site sets differ")]
    SiteMismatch,
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("dense state too large ({qudits} qudits, cap {cap}); use the lazy protocol path")]
    DenseCap { qudits: usize, cap: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("neighbour {0} was measured before its entangling gate was applied")]
    MissedEntangler(u64),
    #[error("no oracle term matches the realized generator at cell {0}")]
    NoMatchingTerm(u64),
    #[error("unpaired defect in stack {0}")]
    UnpairedDefect(usize),
    #[error("too many defects for exact matching ({0})")]
    TooManyDefects(usize),
    #[error("missing outcome for cell {0}")]
    MissingOutcome(u64),
    #[error("input state is not symmetric")]
    NotSymmetric,
    #[error("post-selection rejected the outcome at cell {0}")]
    Rejected(u64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
