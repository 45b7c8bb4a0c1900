use thiserror::Error;

use crate::flow::PhasePoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point x = {x} outside the chart domain [{lo}, {hi}]")]
    Domain { x: f64, lo: f64, hi: f64 },

    #[error("invalid metric spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate plane: tangent vectors are parallel within tolerance")]
    DegeneratePlane,

    #[error("adaptive step fell below {h_min:e} at t = {t}")]
    StepUnderflow {
        t: f64,
        h_min: f64,
        last_state: Box<PhasePoint>,
    },

    #[error("step budget of {0} exhausted")]
    StepBudget(usize),

    #[error("no real motion: Clairaut constant {p} exceeds profile value {f0}")]
    NoRealMotion { p: f64, f0: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient fit window: {0}")]
    FitWindow(String),

    #[error("non-positive value {value} at parameter {param} in power-law fit")]
    NonPositive { param: f64, value: f64 },

    #[error("{failed} of {total} trajectories failed (limit 1%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("region {0} overlaps the protected near-boundary zone")]
    RegionOverlap(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
