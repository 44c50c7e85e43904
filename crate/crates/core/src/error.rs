use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("circuit blocked: every branch of parallel group `{0}` is closed")]
    CircuitBlocked(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("undefined mix: every stream has zero mass flow")]
    UndefinedMix,

    #[error("no circulation: {0}")]
    NoCirculation(String),

    #[error(
        "steady solve did not converge after {iterations} iterations \
         (worst residual {worst_residual:.3e} at `{location}`)"
    )]
    NonConvergence {
        iterations: usize,
        worst_residual: f64,
        location: String,
    },

    #[error(
        "capacity exceeded: total load {load_w:.1} W is above the {capacity_w:.1} W \
         the coolers deliver at {max_temperature_k} K"
    )]
    CapacityExceeded {
        load_w: f64,
        capacity_w: f64,
        max_temperature_k: f64,
    },

    #[error("solve cancelled")]
    Cancelled,

    #[error("integration failure at node `{node}`: {reason}")]
    Integration { node: String, reason: String },

    #[error("offset-dominated measurement: inlet and outlet shifted by the same amount")]
    OffsetDominated,

    #[error("unidentifiable system: unknowns not pinned by the measurements: {0:?}")]
    Unidentifiable(Vec<String>),

    #[error("invalid action: {0}")]
    InvalidAction(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
