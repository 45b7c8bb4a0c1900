//! Geodesic flow on the model manifold.
//!
//! [`integrate`] is an embedded Dormand–Prince 5(4) integrator of the
//! first-order system `(ẋ, v̇) = (v, −Γ(v, v))` with event handling for the
//! reflecting wall at `x_max`, the abort guard at `x_floor`, and an optional
//! stopping threshold on `f = ℓ^{1/2}`. Speed is never renormalised; the
//! largest deviation of `‖v‖_g` from its initial value is reported instead.
//!
//! [`cusp_geodesic_oracle`] solves the same problem on the unperturbed cusp
//! plane by quadrature and serves as an independent check.

mod integrator;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, x_of_f, ManifoldPoint, MetricSpec, TangentVector};

pub use integrator::integrate;
pub use oracle::cusp_geodesic_oracle;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub point: ManifoldPoint,
    pub velocity: TangentVector,
}

impl PhasePoint {
    pub fn new(point: ManifoldPoint, velocity: TangentVector) -> Self {
        PhasePoint { point, velocity }
    }

    /// Unit vector with orthonormal-frame components `w` (normalised here).
    pub fn from_frame(point: ManifoldPoint, w: [f64; 4], spec: &MetricSpec) -> Self {
        let n = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        let w = w.map(|c| c / n);
        PhasePoint::new(point, geometry::from_frame(&point, w, spec))
    }

    pub fn speed(&self, spec: &MetricSpec) -> f64 {
        geometry::norm(&self.point, &self.velocity, spec)
    }

    pub fn reversed(&self) -> Self {
        PhasePoint::new(self.point, -self.velocity)
    }

    /// Cusp-plane speed `√(4 vx² + x⁶ vτ²)`.
    pub fn cusp_speed(&self) -> f64 {
        let x3 = self.point.x.powi(3);
        (4.0 * self.velocity.vx * self.velocity.vx + x3 * x3 * self.velocity.vtau * self.velocity.vtau).sqrt()
    }

    pub(crate) fn to_state(self) -> [f64; 8] {
        let p = self.point.as_array();
        let v = self.velocity.as_array();
        [p[0], p[1], p[2], p[3], v[0], v[1], v[2], v[3]]
    }

    pub(crate) fn from_state(y: &[f64; 8]) -> Self {
        PhasePoint {
            point: ManifoldPoint::from_array([y[0], y[1], y[2], y[3]]),
            velocity: TangentVector::from_array([y[4], y[5], y[6], y[7]]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BoundaryHit,
    WallReflection,
    ThresholdCross,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub state: PhasePoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Horizon,
    BoundaryHit,
    Threshold,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: usize,
    pub rejected: usize,
    /// Largest `|‖v(t)‖_g − ‖v(0)‖_g|` over accepted steps.
    pub max_energy_drift: f64,
    /// False when the drift exceeded the declared tolerance.
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub stats: IntegratorStats,
    pub termination: Termination,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory always holds its initial sample")
    }

    pub fn final_time(&self) -> f64 {
        self.last().t
    }

    pub fn final_state(&self) -> PhasePoint {
        self.last().state
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Output {
    /// One sample per accepted step.
    EveryStep,
    /// Samples at integer multiples of the spacing (steps land on them).
    Uniform(f64),
    /// Initial state, events and final state only.
    Endpoints,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_min: f64,
    pub max_step: f64,
    /// Geometric step bound `h <= step_factor * x / c`, `c` the cusp-plane
    /// speed (so `h <= step_factor * x` for generic unit vectors).
    pub step_factor: f64,
    pub max_steps: usize,
    pub energy_tolerance: f64,
    /// Stop at the first time `f = ℓ^{1/2}` reaches this level from below.
    pub stop_at_f: Option<f64>,
    pub output: Output,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-11,
            atol: 1e-13,
            h_min: 1e-12,
            max_step: 0.5,
            step_factor: 0.1,
            max_steps: 20_000_000,
            energy_tolerance: 1e-8,
            stop_at_f: None,
            output: Output::EveryStep,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeTime {
    pub t: f64,
    pub kind: EscapeKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscapeKind {
    /// `f` reached `2ε` at `t`.
    Crossed,
    /// Never crossed before the cap `10/ε`.
    Capped,
    /// Hit `x_floor` at `t` first; the escape time is at least `t`.
    LowerBound,
}

/// Horizon cap for escape runs, in units of `1/ε`.
pub const ESCAPE_CAP: f64 = 10.0;

/// First time `f(γ(t)) = 2ε`, or the cap `10/ε`.
pub fn escape_time(v0: &PhasePoint, eps: f64, spec: &MetricSpec) -> Result<EscapeTime> {
    escape_time_with(v0, eps, spec, &IntegratorOptions::default())
}

pub fn escape_time_with(v0: &PhasePoint, eps: f64, spec: &MetricSpec, opts: &IntegratorOptions) -> Result<EscapeTime> {
    if !(eps > 0.0 && x_of_f(4.0 * eps) < spec.x_max) {
        return Err(Error::Precondition(format!(
            "escape threshold needs 0 < eps and f^-1(4 eps) < x_max, got eps = {eps}"
        )));
    }
    let opts = IntegratorOptions {
        stop_at_f: Some(2.0 * eps),
        output: Output::Endpoints,
        ..*opts
    };
    let traj = integrate(v0, ESCAPE_CAP / eps, spec, &opts)?;
    let t = traj.final_time();
    let kind = match traj.termination {
        Termination::Threshold => EscapeKind::Crossed,
        Termination::Horizon => EscapeKind::Capped,
        Termination::BoundaryHit => EscapeKind::LowerBound,
    };
    Ok(EscapeTime { t, kind })
}
