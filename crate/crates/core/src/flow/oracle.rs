//! Quadrature solution of geodesics on the unperturbed cusp plane.
//!
//! With `u = 2x` the cusp plane is the surface of revolution
//! `du² + F(u)² dτ²`, `F(u) = u³/8`, and the Clairaut constant
//! `p = F² dτ/dσ` is conserved (`σ` is cusp-plane arc length). Writing the
//! trajectory through its turning point `u* = 2 |p|^{1/3}` as
//! `u = u* + S²`, with `S < 0` inbound and `S > 0` outbound, both
//!
//! ```text
//!     dσ/dS = 2F / √(Q (F + |p|)),      dτ/dS = 2p / (F √(Q (F + |p|))),
//!     Q = (u² + u u* + u*²) / 8
//! ```
//!
//! are smooth through the turning point, so plain Gauss–Legendre quadrature
//! applies without any endpoint treatment. Arc length is inverted by
//! safeguarded Newton iteration.

use std::sync::OnceLock;

use super::{Event, EventKind, IntegratorStats, PhasePoint, Sample, Termination, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{ManifoldPoint, MetricSpec, TangentVector};

const GL_ORDER: usize = 16;

fn gauss_legendre() -> &'static [(f64, f64); GL_ORDER] {
    static RULE: OnceLock<[(f64, f64); GL_ORDER]> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_ORDER;
        let mut rule = [(0.0, 0.0); GL_ORDER];
        for (i, node) in rule.iter_mut().enumerate() {
            let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                // Legendre recurrence for P_n and its derivative
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                let dz = p1 / dp;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            *node = (z, 2.0 / ((1.0 - z * z) * dp * dp));
        }
        rule
    })
}

fn gl(f: &impl Fn(f64) -> [f64; 2], a: f64, b: f64) -> [f64; 2] {
    let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
    let mut acc = [0.0; 2];
    for &(z, w) in gauss_legendre() {
        let v = f(m + r * z);
        acc[0] += w * v[0];
        acc[1] += w * v[1];
    }
    [acc[0] * r, acc[1] * r]
}

fn adaptive(f: &impl Fn(f64) -> [f64; 2], a: f64, b: f64, whole: [f64; 2], tol: f64, depth: u32) -> [f64; 2] {
    let m = 0.5 * (a + b);
    let l = gl(f, a, m);
    let r = gl(f, m, b);
    let sum = [l[0] + r[0], l[1] + r[1]];
    let err = (sum[0] - whole[0]).abs().max((sum[1] - whole[1]).abs());
    if err <= tol || depth == 0 {
        return sum;
    }
    let left = adaptive(f, a, m, l, 0.5 * tol, depth - 1);
    let right = adaptive(f, m, b, r, 0.5 * tol, depth - 1);
    [left[0] + right[0], left[1] + right[1]]
}

/// The reduced one-dimensional problem in the `S` variable.
struct Quadrature {
    p: f64,
    u_star: f64,
}

impl Quadrature {
    /// `(dσ/dS, dτ/dS)`.
    fn rates(&self, s: f64) -> [f64; 2] {
        let us = self.u_star;
        let u = us + s * s;
        let f = u * u * u / 8.0;
        let q = (u * u + u * us + us * us) / 8.0;
        let root = (q * (f + self.p.abs())).sqrt();
        [2.0 * f / root, 2.0 * self.p / (f * root)]
    }

    /// `(Δσ, Δτ)` from `a` to `b`.
    fn integrate(&self, a: f64, b: f64) -> [f64; 2] {
        if a == b {
            return [0.0, 0.0];
        }
        let f = |s: f64| self.rates(s);
        let whole = gl(&f, a, b);
        let scale = whole[0].abs().max(whole[1].abs()).max(1e-300);
        adaptive(&f, a, b, whole, 1e-15 * scale, 40)
    }

    /// Solves `σ(S) = target` for `S ∈ [a, b]`, where `σ(a) = sigma_a`.
    fn invert(&self, a: f64, sigma_a: f64, b: f64, target: f64) -> (f64, [f64; 2]) {
        let (mut lo, mut hi) = (a, b);
        let mut s = (a + (target - sigma_a) / self.rates(a)[0]).clamp(a, b);
        let mut delta = self.integrate(a, s);
        for _ in 0..200 {
            let resid = sigma_a + delta[0] - target;
            if resid.abs() <= 1e-15 * target.abs().max(1.0) {
                break;
            }
            if resid > 0.0 {
                hi = s;
            } else {
                lo = s;
            }
            let newton = s - resid / self.rates(s)[0];
            let next = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if next == s {
                break;
            }
            // Integrate the short correction rather than from `a` again.
            let step = self.integrate(s, next);
            delta = [delta[0] + step[0], delta[1] + step[1]];
            s = next;
        }
        (s, delta)
    }
}

/// Geodesic from `v0` by quadrature, sampled every `dt` up to `horizon`.
///
/// Requires `η = 0`. Torus components of `v0` (if any) are followed as the
/// straight lines they are in the product metric.
pub fn cusp_geodesic_oracle(v0: &PhasePoint, horizon: f64, spec: &MetricSpec, dt: f64) -> Result<Trajectory> {
    spec.validate()?;
    if spec.eta != 0.0 {
        return Err(Error::Precondition("the quadrature oracle needs eta = 0".into()));
    }
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::Precondition("horizon and dt must be positive".into()));
    }
    let x0 = v0.point.x;
    spec.check_domain(x0)?;

    let vel = v0.velocity;
    let w0 = 2.0 * vel.vx;
    let w1 = x0.powi(3) * vel.vtau;
    let c = w0.hypot(w1);
    let f0 = x0.powi(3);
    let (y1_0, y2_0) = (v0.point.y1, v0.point.y2);
    let point_at = |x: f64, tau: f64, t: f64| ManifoldPoint::new(x, tau, y1_0 + vel.vy1 * t, y2_0 + vel.vy2 * t, spec);

    let n_out = (horizon / dt).floor() as usize;
    let mut times: Vec<f64> = (1..=n_out).map(|k| k as f64 * dt).collect();
    if times.last().is_none_or(|&t| t < horizon * (1.0 - 1e-15)) {
        times.push(horizon);
    }

    let mut samples = vec![Sample { t: 0.0, state: *v0 }];
    let mut events = Vec::new();
    let stats = IntegratorStats {
        valid: true,
        ..IntegratorStats::default()
    };

    if c == 0.0 {
        for &t in &times {
            samples.push(Sample {
                t,
                state: PhasePoint::new(point_at(x0, v0.point.tau, t), vel),
            });
        }
        return Ok(Trajectory {
            samples,
            events,
            stats: IntegratorStats {
                steps: times.len(),
                ..stats
            },
            termination: Termination::Horizon,
        });
    }

    let p = f0 * w1 / c;
    if p.abs() > f0 * (1.0 + 1e-12) {
        return Err(Error::NoRealMotion { p, f0 });
    }
    let u_star = 2.0 * p.abs().cbrt();
    let quad = Quadrature { p, u_star };

    // S0² = u0 − u*, computed without cancellation from F0 − |p| = S0² Q0.
    let u0 = 2.0 * x0;
    let q0 = (u0 * u0 + u0 * u_star + u_star * u_star) / 8.0;
    let s0 = w0.signum() * w0.abs() * (f0 / (c * (c + w1.abs()) * q0)).sqrt();
    let s0 = if w0 == 0.0 { 0.0 } else { s0 };

    let s_wall = (2.0 * spec.x_max - u_star).max(0.0).sqrt();
    let u_floor = 2.0 * spec.x_floor;
    let s_floor = (u_floor > u_star).then(|| -(u_floor - u_star).sqrt());

    let state_at = |s: f64, tau: f64, t: f64| {
        let u = u_star + s * s;
        let x = 0.5 * u;
        let rates = quad.rates(s);
        let vx = c * s / rates[0];
        let vtau = c * p / (x.powi(6));
        PhasePoint::new(point_at(x, tau, t), TangentVector::new(vx, vtau, vel.vy1, vel.vy2))
    };

    // Anchor: a known point (S, σ, τ) on the current outbound/inbound sweep.
    let (mut s_a, mut sigma_a, mut tau_a) = (s0.min(s_wall), 0.0, v0.point.tau);
    let mut termination = Termination::Horizon;

    'outputs: for &t in &times {
        let target = c * t;
        loop {
            let (s_end, end_kind) = match s_floor {
                Some(sf) if s_a < sf => (sf, EventKind::BoundaryHit),
                _ => (s_wall, EventKind::WallReflection),
            };
            let seg = quad.integrate(s_a, s_end);
            if sigma_a + seg[0] >= target {
                let (s, delta) = quad.invert(s_a, sigma_a, s_end, target);
                s_a = s;
                sigma_a += delta[0];
                tau_a += delta[1];
                samples.push(Sample {
                    t,
                    state: state_at(s, tau_a, t),
                });
                break;
            }
            sigma_a += seg[0];
            tau_a += seg[1];
            let t_event = sigma_a / c;
            events.push(Event {
                t: t_event,
                kind: end_kind,
            });
            match end_kind {
                EventKind::BoundaryHit => {
                    samples.push(Sample {
                        t: t_event,
                        state: state_at(s_end, tau_a, t_event),
                    });
                    termination = Termination::BoundaryHit;
                    break 'outputs;
                }
                _ => s_a = -s_wall,
            }
        }
    }

    Ok(Trajectory {
        stats: IntegratorStats {
            steps: samples.len() - 1,
            ..stats
        },
        samples,
        events,
        termination,
    })
}
