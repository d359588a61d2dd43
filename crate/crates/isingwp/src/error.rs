use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("gate acts twice on qubit {0}")]
    DuplicateQubit(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate wavepacket spec: {0}")]
    DegenerateSpec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("post-selection on a zero-probability branch")]
    ZeroProbability,

    #[error("angle system is singular at coefficient {0}")]
    AngleSolve(usize),

    #[error("eigensolver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("lowest state of momentum block {0} is degenerate")]
    Degenerate(usize),

    #[error("kinematically infeasible: {0}")]
    Kinematics(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("energy rescale unstable: {0}")]
    RescaleUnstable(String),

    #[error("degenerate skewness window: {0}")]
    DegenerateWindow(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
