use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown setup `{0}`")]
    UnknownSetup(String),
    #[error("invalid setup parameters: {0}")]
    InvalidParameters(String),
    #[error("point lies outside every coordinate patch")]
    OutOfAtlas,
    #[error("degenerate critical point `{id}`: smallest |eigenvalue| {min_abs:.3e}")]
    DegenerateCritical { id: String, min_abs: f64 },
    #[error("Newton iteration for a critical point did not converge (residual {0:.3e})")]
    CriticalNewtonFailed(f64),
    #[error("normal chart radius {radius} too large at `{id}`: {reason}")]
    ChartRadiusTooLarge { id: String, radius: f64, reason: String },
    #[error("unknown critical point `{0}`")]
    UnknownCritical(String),
    #[error("no trajectories: f({from}) <= f({to})")]
    EmptyByEnergy { from: String, to: String },
    #[error("trajectory from `{0}` left the horizon without being captured")]
    NoCapture(String),
    #[error("integrator step size underflow at s = {0}")]
    StepUnderflow(f64),
    #[error("source index {0} unsupported by the direction sweep (at most 2)")]
    UnsupportedIndex(usize),
    #[error("normalisation level epsilon {eps} is not smaller than the critical-value gap {gap}")]
    EpsilonTooLarge { eps: f64, gap: f64 },
    #[error("trajectory never reaches the normalisation level {0}")]
    LevelNotReached(f64),
    #[error("trajectory too short for a linearised operator ({0} samples)")]
    TrajectoryTooShort(usize),
    #[error("no clear singular-value gap: largest zero {zero:.3e}, smallest nonzero {nonzero:.3e}")]
    SpectralGapAmbiguous { zero: f64, nonzero: f64 },
    #[error("asymptotic fit window too short ({0} samples)")]
    WindowTooShort(usize),
    #[error("both obstruction fibres are empty; nothing to obstruct")]
    NothingToObstruct,
    #[error("perturbation is not transverse: {0}")]
    NotTransverse(String),
    #[error("perturbation violates the C1 bound: {value:.3e} > {bound:.3e}")]
    C1BoundExceeded { value: f64, bound: f64 },
    #[error("gluing count unstable under refinement: {0}")]
    UnstableCount(String),
    #[error("obstruction fibre rank {0} unsupported for signed counts (rank 1 only)")]
    UnsupportedRank(usize),
    #[error("boundary operator does not square to zero: {0}")]
    NotAComplex(String),
    #[error("incomplete differential data: {0}")]
    IncompleteData(String),
    #[error("integer overflow during Smith normal form")]
    Overflow,
    #[error("invalid index tuple: {0}")]
    InvalidTuple(String),
    #[error("no moduli space from {from} to {to} in the catalog")]
    MissingModuli { from: String, to: String },
    #[error("invalid sub-index collection: {0}")]
    InvalidCollection(String),
    #[error("tuples contract to different entries ({0} vs {1})")]
    IncomparableContractions(usize, usize),
    #[error("report has no data for {0}")]
    MissingSeries(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
