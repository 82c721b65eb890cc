use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("DEM parse error at line {line}: {msg}")]
    DemParse { line: usize, msg: String },

    #[error("DEM has no data at ({x:.3}, {y:.3})")]
    NoData { x: f64, y: f64 },

    #[error("point ({x:.3}, {y:.3}) lies outside the DEM hull")]
    OutOfHull { x: f64, y: f64 },

    #[error("terrain profile is empty: the whole segment lies inside the exclusion radius")]
    EmptyProfile,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    #[error("least-squares iteration diverged after {iterations} iterations")]
    Divergence { iterations: usize },

    #[error("scenario field `{field}`: {msg}")]
    Scenario { field: String, msg: String },

    #[error("infeasible false-alarm budget: positioning-only mass {po_mass:e} >= requirement {p_fa_req:e}")]
    InfeasibleBudget { po_mass: f64, p_fa_req: f64 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
