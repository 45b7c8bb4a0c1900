use super::{
    Event, EventKind, IntegratorOptions, IntegratorStats, Output, PhasePoint, Sample, Termination, Trajectory,
};
use crate::error::{Error, Result};
use crate::geometry::{f_of_x, geodesic_acceleration, metric_diagonal, MetricSpec};

type State = [f64; 8];

// Dormand–Prince 5(4) tableau. The system is autonomous, so the nodes
// c_i are not needed.

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*, the embedded error weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

#[inline]
fn rhs(y: &State, spec: &MetricSpec) -> State {
    let a = geodesic_acceleration(&[y[0], y[1], y[2], y[3]], &[y[4], y[5], y[6], y[7]], spec);
    [y[4], y[5], y[6], y[7], a[0], a[1], a[2], a[3]]
}

#[inline]
fn combine(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..8 {
            out[i] += h * c * k[i];
        }
    }
    out
}

struct Step {
    y: State,
    /// Derivative at the new point (first stage of the next step).
    k7: State,
    err: f64,
}

fn dopri_step(y: &State, k1: &State, h: f64, spec: &MetricSpec, opts: &IntegratorOptions) -> Step {
    let k2 = rhs(&combine(y, h, &[(A21, k1)]), spec);
    let k3 = rhs(&combine(y, h, &[(A31, k1), (A32, &k2)]), spec);
    let k4 = rhs(&combine(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]), spec);
    let k5 = rhs(&combine(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]), spec);
    let k6 = rhs(
        &combine(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        spec,
    );
    let y_new = combine(y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = rhs(&y_new, spec);

    let mut sum = 0.0;
    for i in 0..8 {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
        sum += (e / sc) * (e / sc);
    }
    Step {
        y: y_new,
        k7,
        err: (sum / 8.0).sqrt(),
    }
}

fn speed(y: &State, spec: &MetricSpec) -> f64 {
    let d = metric_diagonal(y[0], y[2], spec);
    (d[0] * y[4] * y[4] + d[1] * y[5] * y[5] + d[2] * y[6] * y[6] + d[3] * y[7] * y[7]).sqrt()
}

fn reduce(y: &mut State, spec: &MetricSpec) {
    y[1] = y[1].rem_euclid(spec.tau_period);
    y[2] = y[2].rem_euclid(spec.torus_sides[0]);
    y[3] = y[3].rem_euclid(spec.torus_sides[1]);
}

/// Largest step allowed by the geometry at `y`.
fn geometric_cap(y: &State, opts: &IntegratorOptions) -> f64 {
    let x = y[0];
    let x3 = x * x * x;
    let c = (4.0 * y[4] * y[4] + x3 * x3 * y[5] * y[5]).sqrt();
    if c * opts.max_step > opts.step_factor * x {
        opts.step_factor * x / c
    } else {
        opts.max_step
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Crossing {
    Floor,
    Wall,
    Threshold,
}

/// Signed event function; negative before the event.
fn event_value(kind: Crossing, y: &State, spec: &MetricSpec, opts: &IntegratorOptions) -> f64 {
    match kind {
        Crossing::Floor => spec.x_floor - y[0],
        Crossing::Wall => y[0] - spec.x_max,
        Crossing::Threshold => f_of_x(y[0]) - opts.stop_at_f.unwrap_or(f64::INFINITY),
    }
}

/// Finds the fraction of the step at which the event function changes sign,
/// by Illinois false position over single Runge–Kutta steps from `y`.
fn locate(kind: Crossing, y: &State, k1: &State, h: f64, spec: &MetricSpec, opts: &IntegratorOptions) -> (f64, State) {
    let g = |s: f64| {
        let st = dopri_step(y, k1, s, spec, opts);
        (event_value(kind, &st.y, spec, opts), st.y)
    };
    let (mut a, mut ga) = (0.0, event_value(kind, y, spec, opts));
    let (mut b, (mut gb, mut yb)) = (h, g(h));
    let mut side = 0i8;
    for _ in 0..200 {
        if (b - a).abs() <= 1e-15 * h.abs().max(1e-300) || gb == 0.0 {
            break;
        }
        let s = (a * gb - b * ga) / (gb - ga);
        let s = if s > a && s < b { s } else { 0.5 * (a + b) };
        let (gs, ys) = g(s);
        if gs.abs() < 1e-15 {
            return (s, ys);
        }
        if gs > 0.0 {
            b = s;
            gb = gs;
            yb = ys;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        } else {
            a = s;
            ga = gs;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        }
    }
    // Converged by bracket width: report the first point at or past the event.
    (b, yb)
}

/// Integrates the geodesic through `v0` up to `horizon`.
pub fn integrate(v0: &PhasePoint, horizon: f64, spec: &MetricSpec, opts: &IntegratorOptions) -> Result<Trajectory> {
    spec.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    spec.check_domain(v0.point.x)?;

    let mut y = v0.to_state();
    let mut t = 0.0;
    let speed0 = speed(&y, spec);
    let mut stats = IntegratorStats {
        valid: true,
        ..IntegratorStats::default()
    };
    let mut samples = vec![Sample {
        t: 0.0,
        state: PhasePoint::from_state(&y),
    }];
    let mut events = Vec::new();
    let mut k1 = rhs(&y, spec);

    let mut h = (0.01 * geometric_cap(&y, opts)).max(opts.h_min * 10.0);
    let mut next_out = match opts.output {
        Output::Uniform(dt) => {
            if !(dt > 0.0) {
                return Err(Error::Precondition("output spacing must be positive".into()));
            }
            Some(dt)
        }
        _ => None,
    };
    let mut out_index = 1u64;

    let termination = loop {
        if t >= horizon {
            break Termination::Horizon;
        }
        if stats.steps >= opts.max_steps {
            return Err(Error::StepBudget(opts.max_steps));
        }

        h = h.min(geometric_cap(&y, opts)).min(horizon - t);
        let mut landing = false;
        if let Some(to) = next_out {
            if to - t <= h {
                h = to - t;
                landing = true;
            }
        }
        if h < opts.h_min && horizon - t > opts.h_min && !landing {
            return Err(Error::StepUnderflow {
                t,
                h_min: opts.h_min,
                last_state: Box::new(PhasePoint::from_state(&y)),
            });
        }

        let step = dopri_step(&y, &k1, h, spec, opts);
        if !(step.err <= 1.0) {
            stats.rejected += 1;
            let fac = if step.err.is_finite() {
                (SAFETY * step.err.powf(-0.2)).max(FAC_MIN)
            } else {
                FAC_MIN
            };
            h *= fac;
            if h < opts.h_min {
                return Err(Error::StepUnderflow {
                    t,
                    h_min: opts.h_min,
                    last_state: Box::new(PhasePoint::from_state(&y)),
                });
            }
            continue;
        }

        // Accepted: check for crossings in order of precedence.
        let mut hit: Option<(Crossing, f64, State)> = None;
        for kind in [Crossing::Floor, Crossing::Threshold, Crossing::Wall] {
            if kind == Crossing::Threshold && opts.stop_at_f.is_none() {
                continue;
            }
            if event_value(kind, &y, spec, opts) <= 0.0 && event_value(kind, &step.y, spec, opts) > 0.0 {
                let (s, ys) = locate(kind, &y, &k1, h, spec, opts);
                if hit.as_ref().is_none_or(|(_, s0, _)| s < *s0) {
                    hit = Some((kind, s, ys));
                }
            }
        }

        stats.steps += 1;
        let fac = (SAFETY * step.err.max(1e-10).powf(-0.2)).clamp(FAC_MIN, FAC_MAX);

        let (t_new, mut y_new, event) = match hit {
            Some((kind, s, ys)) => (t + s, ys, Some(kind)),
            None => (t + h, step.y, None),
        };
        let drift = (speed(&y_new, spec) - speed0).abs();
        stats.max_energy_drift = stats.max_energy_drift.max(drift);

        match event {
            Some(Crossing::Wall) => {
                y_new[0] = spec.x_max;
                y_new[4] = -y_new[4].abs();
                events.push(Event {
                    t: t_new,
                    kind: EventKind::WallReflection,
                });
            }
            Some(Crossing::Floor) => events.push(Event {
                t: t_new,
                kind: EventKind::BoundaryHit,
            }),
            Some(Crossing::Threshold) => events.push(Event {
                t: t_new,
                kind: EventKind::ThresholdCross,
            }),
            None => {}
        }
        reduce(&mut y_new, spec);
        y = y_new;
        k1 = if event.is_some() { rhs(&y, spec) } else { step.k7 };

        let t_prev = t;
        t = t_new;
        let landed = landing && event.is_none();
        if landed {
            // snap onto the output grid to avoid accumulating round-off
            let dt = match opts.output {
                Output::Uniform(dt) => dt,
                _ => unreachable!(),
            };
            t = dt * out_index as f64;
            out_index += 1;
            next_out = Some(dt * out_index as f64);
        }
        if event.is_none() {
            h = if landing { h.max((t - t_prev) * fac) } else { h * fac };
        }

        let record = match opts.output {
            Output::EveryStep => true,
            Output::Uniform(_) => landed,
            Output::Endpoints => false,
        } || event.is_some();
        if record {
            samples.push(Sample {
                t,
                state: PhasePoint::from_state(&y),
            });
        }

        match event {
            Some(Crossing::Floor) => break Termination::BoundaryHit,
            Some(Crossing::Threshold) => break Termination::Threshold,
            _ => {}
        }
    };

    if opts.output == Output::Endpoints && samples.last().is_none_or(|s| s.t != t) {
        samples.push(Sample {
            t,
            state: PhasePoint::from_state(&y),
        });
    }
    if stats.max_energy_drift > opts.energy_tolerance {
        stats.valid = false;
    }
    Ok(Trajectory {
        samples,
        events,
        stats,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ManifoldPoint, TangentVector};

    fn start(x: f64, w: [f64; 4], spec: &MetricSpec) -> PhasePoint {
        PhasePoint::from_frame(ManifoldPoint::new(x, 0.2, 0.3, 0.7, spec), w, spec)
    }

    #[test]
    fn torus_direction_is_a_straight_line() {
        let spec = MetricSpec::default();
        let v0 = start(0.5, [0.0, 0.0, 0.6, 0.8], &spec);
        let traj = integrate(&v0, 3.0, &spec, &IntegratorOptions::default()).unwrap();
        let end = traj.final_state();
        assert_eq!(traj.final_time(), 3.0);
        assert_eq!(end.point.x, 0.5);
        assert_eq!(end.point.tau, v0.point.tau);
        assert!((end.point.y1 - (0.3 + 1.8f64).rem_euclid(1.0)).abs() < 1e-12);
        assert!((end.point.y2 - (0.7 + 2.4f64).rem_euclid(1.0)).abs() < 1e-12);
    }

    #[test]
    fn radial_inward_line_reaches_the_floor() {
        let spec = MetricSpec::default();
        let v0 = PhasePoint::new(
            ManifoldPoint::new(0.5, 0.0, 0.0, 0.0, &spec),
            TangentVector::new(-0.5, 0.0, 0.0, 0.0),
        );
        let opts = IntegratorOptions {
            output: Output::Uniform(0.1),
            ..IntegratorOptions::default()
        };
        let traj = integrate(&v0, 2.0, &spec, &opts).unwrap();
        for s in &traj.samples {
            assert!((s.state.point.x - (0.5 - s.t / 2.0)).abs() < 1e-12, "t = {}", s.t);
        }
        assert_eq!(traj.termination, Termination::BoundaryHit);
        let hit = traj.events.last().unwrap();
        assert_eq!(hit.kind, EventKind::BoundaryHit);
        assert!((hit.t - 2.0 * (0.5 - 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn wall_reflection_preserves_speed() {
        let spec = MetricSpec::with_eta(0.3);
        let v0 = start(0.9, [0.8, 0.1, 0.3, 0.5], &spec);
        let traj = integrate(&v0, 2.0, &spec, &IntegratorOptions::default()).unwrap();
        let idx = traj
            .samples
            .iter()
            .position(|s| s.state.point.x == spec.x_max)
            .expect("wall sample");
        let at_wall = traj.samples[idx].state;
        assert!(at_wall.velocity.vx < 0.0);
        assert!(traj.events.iter().any(|e| e.kind == EventKind::WallReflection));
        assert!((at_wall.speed(&spec) - 1.0).abs() < 1e-9);
        assert!(traj.samples.iter().all(|s| s.state.point.x <= spec.x_max));
    }

    #[test]
    fn threshold_stop() {
        let spec = MetricSpec::default();
        let v0 = PhasePoint::new(
            ManifoldPoint::new(0.1, 0.0, 0.0, 0.0, &spec),
            TangentVector::new(0.5, 0.0, 0.0, 0.0),
        );
        let opts = IntegratorOptions {
            stop_at_f: Some(f_of_x(0.2)),
            ..IntegratorOptions::default()
        };
        let traj = integrate(&v0, 10.0, &spec, &opts).unwrap();
        assert_eq!(traj.termination, Termination::Threshold);
        assert!((traj.final_time() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn bad_inputs() {
        let spec = MetricSpec::default();
        let v0 = start(0.5, [1.0, 0.0, 0.0, 0.0], &spec);
        let opts = IntegratorOptions::default();
        assert!(integrate(&v0, 0.0, &spec, &opts).is_err());
        let outside = start(2.0, [1.0, 0.0, 0.0, 0.0], &spec);
        assert!(matches!(
            integrate(&outside, 1.0, &spec, &opts),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn step_underflow_reports_last_state() {
        let spec = MetricSpec::default();
        let v0 = start(0.5, [0.6, 0.8, 0.0, 0.0], &spec);
        let opts = IntegratorOptions {
            rtol: 1e-30,
            atol: 1e-300,
            h_min: 1e-3,
            ..IntegratorOptions::default()
        };
        match integrate(&v0, 1.0, &spec, &opts) {
            Err(Error::StepUnderflow { last_state, .. }) => assert_eq!(last_state.point.x, 0.5),
            other => panic!("expected underflow, got {other:?}"),
        }
    }
}
