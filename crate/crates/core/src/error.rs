use crate::linops::SolveStats;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {stage} (sample {index})")]
    NonFinite { stage: &'static str, index: usize },

    #[error("conjugate gradients did not converge: {0}")]
    CgNotConverged(SolveStats),

    #[error("step-size collapse at t = {t}: dt = {dt:e}")]
    StepCollapse { t: f64, dt: f64 },

    #[error("singular least-squares system: {0}")]
    Singular(String),

    #[error("operator dimension {dim} exceeds the dense cap of {cap}; reduce the network for diagnostics")]
    DenseCap { dim: usize, cap: usize },

    #[error("finite-difference grid needs about {needed} bytes, over the cap of {cap}; grids much past 150³ run out of memory on a workstation")]
    MemoryCap { needed: u64, cap: u64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("problem `{0}` has no analytic solution")]
    MissingAnalytic(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to usage or configuration mistakes).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::CgNotConverged(_)
                | Error::StepCollapse { .. }
                | Error::Singular(_)
                | Error::Domain(_)
        )
    }
}
