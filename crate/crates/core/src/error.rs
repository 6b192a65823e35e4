use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,
    #[error("argument outside the function domain: {0}")]
    DomainError(String),
    #[error("chi-square density with 1 degree of freedom is unbounded at 0")]
    BoundarySingularity,
    #[error("kernel density estimate needs at least one sample")]
    EmptySample,
    #[error("reference chi-square density underflowed at d2 = {0}")]
    ReferenceDensityZero(f64),
    #[error("component {component} is degenerate")]
    DegenerateComponent { component: usize },
    #[error("too few rows: need at least {needed}, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("every candidate root was discarded as degenerate")]
    AllRootsDegenerate,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("fewer than two points left after masking")]
    FewerThanTwoPoints,
    #[error("number of components differs: fitted {fitted}, reference {reference}")]
    KMismatch { fitted: usize, reference: usize },
    #[error("monitoring grid needs at least three bandwidth cells for some K")]
    GridTooSmall,
    #[error("dimension must be at least {min}, got {got}")]
    DimensionTooSmall { min: usize, got: usize },
    #[error("rejection sampling exceeded {0} attempts for one outlier")]
    RejectionBudgetExceeded(usize),
}
