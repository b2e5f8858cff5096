use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown flux `{0}`")]
    UnknownFlux(String),
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("point {0:?} lies outside the space-time domain")]
    Domain(Vec<f64>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid network: {0}")]
    Network(String),
    #[error("candidate pool is empty")]
    EmptyCandidates,
    #[error("benchmark `{0}` has no closed-form solution")]
    Unsupported(String),
    #[error("reference solver: {0}")]
    Solver(String),
    #[error("reference solver became unstable at t = {time}: max |u| = {max_abs}")]
    Instability { time: f64, max_abs: f64 },
    #[error("non-conforming mesh: {0}")]
    NonConforming(String),
    #[error("network compilation failed: {0}")]
    Compile(String),
    #[error("non-finite loss in strip {strip} at iteration {iteration}: {detail}")]
    NonFiniteLoss {
        strip: usize,
        iteration: usize,
        detail: String,
    },
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
