use alloc::string::String;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Numerical,
    CapExceeded,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("network: unknown node id `{0}`")]
    UnknownNode(String),
    #[error("network: duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("network: self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("network: new hire `{0}` has no office")]
    MissingOffice(String),
    #[error("network: node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("network: pair statistic needs two distinct nodes, got {0} twice")]
    SameNode(usize),
    #[error("permutation is not a bijection: {0}")]
    NotBijection(String),
    #[error("design: {0}")]
    InvalidDesign(String),
    #[error("design: group of order {order} exceeds the enumeration cap {cap}; use Monte Carlo draws")]
    CapExceeded { order: String, cap: u64 },
    #[error("design: column {0} is empty")]
    EmptyColumn(usize),
    #[error("design: treatment `{0}` is continuous and cannot be used in IPW mode; use LATE mode")]
    ContinuousInIpw(String),
    #[error("design: no identifying variation ({0})")]
    NoIdentifyingVariation(String),
    #[error("estimation: singular Gram matrix in office `{0}` (internal inconsistency)")]
    SingularGram(String),
    #[error("estimation: coefficient dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inference: between-office variance needs at least two offices")]
    TooFewOffices,
    #[error("inference: confidence level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("inference: degenerate distribution (sigma = 0)")]
    DegenerateDistribution,
    #[error("placebo: covariate `{0}` is constant within every office")]
    ConstantCovariate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::CapExceeded { .. } => ErrorCategory::CapExceeded,
            Error::SingularGram(_) | Error::DegenerateDistribution => ErrorCategory::Numerical,
            _ => ErrorCategory::Validation,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
