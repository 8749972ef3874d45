use thiserror::Error;

/// Errors raised anywhere in the fitting, asymptotics and simulation stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("EmptyDataset: need at least 2 clusters and n > g (got g = {g}, n = {n})")]
    EmptyDataset { g: usize, n: usize },

    #[error("RaggedCovariates: {0}")]
    RaggedCovariates(String),

    #[error("NonFiniteValue: {0}")]
    NonFiniteValue(String),

    #[error("NoWithinCovariates: centering requires at least one within-cluster covariate")]
    NoWithinCovariates,

    #[error("NonPositiveVariance: variance components must be > 0 (sigma_alpha_sq = {sigma_alpha_sq}, sigma_e_sq = {sigma_e_sq})")]
    NonPositiveVariance { sigma_alpha_sq: f64, sigma_e_sq: f64 },

    #[error("SingularDelta: the GLS information matrix is not positive definite (collinear design?)")]
    SingularDelta,

    #[error("DegenerateWithinDesign: within-cluster cross-product matrix S_w^x is not positive definite")]
    DegenerateWithinDesign,

    #[error("DegenerateBetweenDesign: 1 - c1' C2^-1 c1 = {0} is not positive")]
    DegenerateBetweenDesign(f64),

    #[error("NotPositiveDefinite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("NoConvergence: optimizer did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),

    #[error("InvalidDistribution: {0}")]
    InvalidDistribution(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("AllReplicatesFailed: none of the {0} replicates produced a fit")]
    AllReplicatesFailed(usize),

    #[error("InsufficientSequence: rate probe needs at least 3 distinct sizes, got {0}")]
    InsufficientSequence(usize),

    #[error("ParseError: {0}")]
    Parse(String),

    #[error("IoError: {0}")]
    Io(String),
}

impl Error {
    /// Stable error kind name, matching the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyDataset { .. } => "EmptyDataset",
            Error::RaggedCovariates(_) => "RaggedCovariates",
            Error::NonFiniteValue(_) => "NonFiniteValue",
            Error::NoWithinCovariates => "NoWithinCovariates",
            Error::NonPositiveVariance { .. } => "NonPositiveVariance",
            Error::SingularDelta => "SingularDelta",
            Error::DegenerateWithinDesign => "DegenerateWithinDesign",
            Error::DegenerateBetweenDesign(_) => "DegenerateBetweenDesign",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::AllReplicatesFailed(_) => "AllReplicatesFailed",
            Error::InsufficientSequence(_) => "InsufficientSequence",
            Error::Parse(_) => "ParseError",
            Error::Io(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
