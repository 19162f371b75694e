use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {what}: argument {arg} outside the admissible range")]
    Domain { what: String, arg: f64 },

    #[error("collision: pair ({i},{j}) has separation {sep:e} at node {node}")]
    Collision {
        i: usize,
        j: usize,
        node: usize,
        sep: f64,
    },

    #[error("nucleus collision: electron {i} at position {pos:e} near node {node}")]
    NucleusCollision { i: usize, node: usize, pos: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "solver did not converge: {reason} (residual {residual:e} after {iterations} iterations)"
    )]
    Solver {
        reason: String,
        residual: f64,
        iterations: usize,
    },

    #[error("separation collapse: step length fell below {floor:e}")]
    Barrier { floor: f64 },

    #[error("seeding failed: minimum boundary G = {min_boundary_g:e} does not exceed b = {b:e}")]
    Seeding { min_boundary_g: f64, b: f64 },

    #[error("flow step collapsed at step {step} (dt = {dt:e})")]
    Flow { step: usize, dt: f64 },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
