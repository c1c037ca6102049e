use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point maps to boundary")]
    PointMapsToBoundary,
    #[error("degenerate arc")]
    DegenerateArc,
    #[error("potential evaluation failed: {0}")]
    PotentialEvaluation(String),
    #[error("quadrature node budget exceeded ({0} nodes)")]
    QuadratureBudget(usize),
    #[error("elliptic generator: |trace| = {0}")]
    EllipticGenerator(f64),
    #[error("at least one parabolic required")]
    MissingParabolic,
    #[error("invalid generator set: {0}")]
    InvalidGenerators(String),
    #[error("power must be positive")]
    ZeroPower,
    #[error("series term overflow")]
    SeriesOverflow,
    #[error("invalid counting data: {0}")]
    InvalidCountingData(String),
    #[error("missing weight for orbit element {0}")]
    MissingWeight(String),
    #[error("value {value} out of range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("integration step underflow at parameter {0}")]
    StepUnderflow(f64),
    #[error("shooting failed: {0}")]
    Shooting(String),
    #[error("profile property violated: {property} at t = {t} (margin {margin})")]
    ProfileProperty {
        property: String,
        t: f64,
        margin: f64,
    },
    #[error("insufficient warmup {0} (need at least 5)")]
    InsufficientWarmup(f64),
    #[error("no transition in range")]
    NoTransition,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
