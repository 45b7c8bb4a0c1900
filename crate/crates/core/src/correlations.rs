//! Observables, correlations and the mixing-exponent bound.
//!
//! `a` is a bump on a ball `U` in the thick part (constant in the fiber) and
//! `b_ε(v) = ψ(f/ε) ψ(r/ε²)` is supported in `V_ε`. Geodesics from `V_ε`
//! keep `f ≤ 2ε` for time `1/(C₀ε)`, so `a · b_ε∘φ_T` vanishes identically
//! at `T = 1/(C₀ε)` and `C_T(a, b_ε) = (∫a)(∫b_ε)`. Comparing the ε-scaling
//! of that product with the scaling of the observable norms bounds any
//! polynomial mixing exponent.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::boundary::boundary_state;
use crate::error::{Error, Result};
use crate::flow::{integrate, IntegratorOptions, Output, PhasePoint, Termination};
use crate::geometry::{f_of_x, from_frame, metric_diagonal, to_frame, x_of_f, ManifoldPoint, MetricSpec, LAMBDA_NORM};
use crate::measure::{ball_distance, power_law_fit, BaseDensity, FitPoint, FitResult, Proposal, RegionSpec};
use crate::seed::{par_chunked, par_indexed, stream, sub_seed, StreamRng};

use rand::Rng;

/// Radial profiles on `[0, ∞)`, equal to 0 from 1 on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Profile {
    /// `ψ(s) = exp(1 − 1/(1 − s²))`.
    Bump,
    /// 1 on `[0, inner]`, then a smooth step down to 0 at 1.
    Plateau { inner: f64 },
}

fn e_inv(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

impl Profile {
    pub fn eval(&self, s: f64) -> f64 {
        let s = s.abs();
        if s >= 1.0 {
            return 0.0;
        }
        match *self {
            Profile::Bump => (1.0 - 1.0 / (1.0 - s * s)).exp(),
            Profile::Plateau { inner } => {
                if s <= inner {
                    1.0
                } else {
                    let t = (s - inner) / (1.0 - inner);
                    let (up, down) = (e_inv(1.0 - t), e_inv(t));
                    up / (up + down)
                }
            }
        }
    }
}

/// Plateau fraction used for `a`.
pub const A_PLATEAU: f64 = 0.7;

/// A metric ball in the thick part: the base set `U`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub center: [f64; 4],
    pub radius: f64,
}

impl Default for BallSpec {
    fn default() -> Self {
        BallSpec {
            center: [0.7, 0.5, 0.5, 0.5],
            radius: 0.15,
        }
    }
}

impl BallSpec {
    pub fn center_point(&self, spec: &MetricSpec) -> ManifoldPoint {
        let [x, t, y1, y2] = self.center;
        ManifoldPoint::new(x, t, y1, y2, spec)
    }

    /// Smallest `x` in the ball (`g_xx = 4`).
    pub fn x_min(&self) -> f64 {
        self.center[0] - self.radius / 2.0
    }

    /// `f` at the deepest point of `U`; `b_ε` requires `2ε` below it.
    pub fn systole_scale(&self) -> f64 {
        f_of_x(self.x_min())
    }

    pub fn region(&self, spec: &MetricSpec) -> RegionSpec {
        RegionSpec::Ball {
            center: self.center_point(spec),
            radius: self.radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Observable {
    Constant {
        value: f64,
    },
    /// `profile(d/R)` with `d` the frozen-metric distance to the centre.
    BallBump {
        ball: BallSpec,
        profile: Profile,
    },
    /// `ψ(f/ε) ψ(r/ε²)`.
    BoundaryBump {
        eps: f64,
    },
}

impl Observable {
    pub fn eval(&self, v: &PhasePoint, spec: &MetricSpec) -> f64 {
        match *self {
            Observable::Constant { value } => value,
            Observable::BallBump { ball, profile } => {
                profile.eval(ball_distance(&ball.center_point(spec), &v.point, spec) / ball.radius)
            }
            Observable::BoundaryBump { eps } => {
                let b = boundary_state(v, spec);
                if b.f >= eps || b.r >= eps * eps {
                    0.0
                } else {
                    Profile::Bump.eval(b.f / eps) * Profile::Bump.eval(b.r / (eps * eps))
                }
            }
        }
    }

    /// A proposal covering the support.
    pub fn proposal(&self, spec: &MetricSpec) -> Result<Proposal> {
        match *self {
            Observable::Constant { .. } => Ok(Proposal::band(spec.x_floor, spec.x_max, 1.0, BaseDensity::Liouville)),
            Observable::BallBump { ball, .. } => ball.region(spec).proposal(1.0, BaseDensity::Liouville, spec),
            Observable::BoundaryBump { eps } => RegionSpec::VEps { eps }.proposal(1.0, BaseDensity::Liouville, spec),
        }
    }

    /// Length scale (in frame units) of the finest feature.
    pub fn feature_scale(&self) -> f64 {
        match *self {
            Observable::Constant { .. } => 1.0,
            Observable::BallBump { ball, .. } => ball.radius,
            Observable::BoundaryBump { eps } => (eps * eps / LAMBDA_NORM).min(eps / LAMBDA_NORM),
        }
    }

    /// The ε of a boundary observable.
    pub fn boundary_scale(&self) -> Option<f64> {
        match *self {
            Observable::BoundaryBump { eps } => Some(eps),
            _ => None,
        }
    }

    /// A point drawn uniformly in normalised support coordinates.
    fn normalised_point(&self, rng: &mut StreamRng, spec: &MetricSpec) -> PhasePoint {
        let angle = |rng: &mut StreamRng| 2.0 * PI * rng.random::<f64>();
        match *self {
            Observable::Constant { .. } => {
                let x = 0.1 + 0.8 * rng.random::<f64>();
                let p = ManifoldPoint::new(x, rng.random(), rng.random(), rng.random(), spec);
                PhasePoint::from_frame(p, crate::measure::uniform_s3(rng), spec)
            }
            Observable::BallBump { ball, .. } => {
                let c = ball.center_point(spec);
                let dir = crate::measure::uniform_s3(rng);
                let d = ball.radius * rng.random::<f64>();
                let g = metric_diagonal(c.x, c.y1, spec);
                let p = ManifoldPoint::new(
                    c.x + d * dir[0] / g[0].sqrt(),
                    c.tau + d * dir[1] / g[1].sqrt(),
                    c.y1 + d * dir[2] / g[2].sqrt(),
                    c.y2 + d * dir[3] / g[3].sqrt(),
                    spec,
                );
                PhasePoint::from_frame(p, crate::measure::uniform_s3(rng), spec)
            }
            Observable::BoundaryBump { eps } => {
                let x = x_of_f(eps * rng.random::<f64>()).max(spec.x_floor * 2.0);
                let p = ManifoldPoint::new(x, rng.random(), rng.random(), rng.random(), spec);
                let c = eps * eps / LAMBDA_NORM * rng.random::<f64>();
                let s = (1.0 - c * c).sqrt();
                let (a, b) = (angle(rng), angle(rng));
                PhasePoint::from_frame(p, [c * a.cos(), c * a.sin(), s * b.cos(), s * b.sin()], spec)
            }
        }
    }
}

/// The observable `a` on `T¹U`.
pub fn build_a(ball: &BallSpec, eps_max: f64, spec: &MetricSpec) -> Result<Observable> {
    spec.validate()?;
    ball.region(spec).proposal(1.0, BaseDensity::Liouville, spec)?;
    if ball.x_min() < 2.0 * x_of_f(eps_max) {
        return Err(Error::RegionOverlap(format!(
            "U reaches x = {} below 2 f^-1(eps_max) = {}",
            ball.x_min(),
            2.0 * x_of_f(eps_max)
        )));
    }
    Ok(Observable::BallBump {
        ball: *ball,
        profile: Profile::Plateau { inner: A_PLATEAU },
    })
}

/// The observable `b_ε` on `V_ε`.
pub fn build_b(eps: f64, ball: &BallSpec, spec: &MetricSpec) -> Result<Observable> {
    spec.validate()?;
    if !(eps > 0.0 && 2.0 * eps < ball.systole_scale()) {
        return Err(Error::Precondition(format!(
            "2 eps = {} must lie below the systole scale {} of U",
            2.0 * eps,
            ball.systole_scale()
        )));
    }
    RegionSpec::VEps { eps }.proposal(1.0, BaseDensity::Liouville, spec)?;
    Ok(Observable::BoundaryBump { eps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integral {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

/// `∫ obs dμ / μ(total)` by sampling the observable's support proposal.
pub fn integral(obs: &Observable, n: usize, spec: &MetricSpec, seed: u64, label: &str) -> Result<Integral> {
    let prop = obs.proposal(spec)?;
    let mass = prop.mass_fraction(spec);
    let vals = par_chunked(n, seed, label, |rng| obs.eval(&prop.sample(rng, spec), spec));
    let (mean, var) = mean_var(&vals);
    Ok(Integral {
        value: mass * mean,
        stderr: mass * (var / n as f64).sqrt(),
        n,
    })
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

// ---------------------------------------------------------------------------
// C^k norms

/// Central-difference weights for the `m`-th derivative, as `(offset, weight)`.
fn stencil(m: usize) -> &'static [(i32, f64)] {
    match m {
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => unreachable!("orders above 3 are rejected earlier"),
    }
}

/// Sorted multi-indices over `dims` directions of every order in `1..=k`.
fn multi_indices(dims: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..k {
        let mut next = Vec::new();
        for idx in &frontier {
            let start = idx.last().copied().unwrap_or(0);
            for d in start..dims {
                let mut n = idx.clone();
                n.push(d);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// The 7-dimensional chart around `v`: footprint moves along the frame,
/// the direction moves along great circles of S³ (frame components fixed
/// otherwise).
struct Chart {
    base: PhasePoint,
    w: [f64; 4],
    perp: [[f64; 4]; 3],
    scales: [f64; 4],
}

impl Chart {
    fn new(v: &PhasePoint, spec: &MetricSpec) -> Self {
        let w = to_frame(&v.point, &v.velocity, spec);
        let n = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        let w = w.map(|c| c / n);
        let mut basis: Vec<[f64; 4]> = Vec::with_capacity(3);
        let mut axes: Vec<usize> = (0..4).collect();
        axes.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()));
        for &axis in &axes {
            if basis.len() == 3 {
                break;
            }
            let mut e = [0.0; 4];
            e[axis] = 1.0;
            for u in std::iter::once(&w).chain(basis.iter()) {
                let d: f64 = (0..4).map(|i| e[i] * u[i]).sum();
                for i in 0..4 {
                    e[i] -= d * u[i];
                }
            }
            let m = e.iter().map(|c| c * c).sum::<f64>().sqrt();
            if m > 1e-8 {
                basis.push(e.map(|c| c / m));
            }
        }
        let g = metric_diagonal(v.point.x, v.point.y1, spec);
        Chart {
            base: *v,
            w,
            perp: [basis[0], basis[1], basis[2]],
            scales: g.map(|d| 1.0 / d.sqrt()),
        }
    }

    fn map(&self, z: &[f64; 7], spec: &MetricSpec) -> PhasePoint {
        let p = &self.base.point;
        let point = ManifoldPoint::new(
            p.x + z[0] * self.scales[0],
            p.tau + z[1] * self.scales[1],
            p.y1 + z[2] * self.scales[2],
            p.y2 + z[3] * self.scales[3],
            spec,
        );
        let mut zeta = [0.0; 4];
        for (j, e) in self.perp.iter().enumerate() {
            for i in 0..4 {
                zeta[i] += z[4 + j] * e[i];
            }
        }
        let a = zeta.iter().map(|c| c * c).sum::<f64>().sqrt();
        let w: [f64; 4] = if a == 0.0 {
            self.w
        } else {
            std::array::from_fn(|i| a.cos() * self.w[i] + a.sin() * zeta[i] / a)
        };
        PhasePoint::new(point, from_frame(&point, w, spec))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkNorm {
    pub k: usize,
    /// `max` over orders `0..=k`.
    pub value: f64,
    /// Sampled sup of the largest derivative of each order `0..=k`.
    pub per_order: Vec<f64>,
    pub step: f64,
    pub n_points: usize,
}

pub const DEFAULT_NORM_POINTS: usize = 2000;

/// Sampled `C^k` norm in the orthonormal frame, by finite differences with
/// step one tenth of the observable's finest feature.
pub fn estimate_ck_norm(obs: &Observable, k: usize, spec: &MetricSpec, seed: u64) -> Result<f64> {
    Ok(estimate_ck_norm_with(obs, k, DEFAULT_NORM_POINTS, spec, seed)?.value)
}

pub fn estimate_ck_norm_with(
    obs: &Observable,
    k: usize,
    n_points: usize,
    spec: &MetricSpec,
    seed: u64,
) -> Result<CkNorm> {
    if !(1..=3).contains(&k) {
        return Err(Error::Precondition(format!("norm order must be 1, 2 or 3, got {k}")));
    }
    if n_points == 0 {
        return Err(Error::Precondition("need at least one norm sample point".into()));
    }
    let step = obs.feature_scale() / 10.0;
    let indices = multi_indices(7, k);
    let per_point: Vec<Vec<f64>> = par_indexed(n_points, |i| {
        let mut rng = stream(seed, "ck_norm", i as u64);
        let v = obs.normalised_point(&mut rng, spec);
        let chart = Chart::new(&v, spec);
        let mut best = vec![0.0; k + 1];
        best[0] = obs.eval(&v, spec).abs();
        for idx in &indices {
            // group repeated directions and take the tensor-product stencil
            let mut dirs: Vec<(usize, usize)> = Vec::new();
            for &d in idx {
                match dirs.last_mut() {
                    Some((dd, m)) if *dd == d => *m += 1,
                    _ => dirs.push((d, 1)),
                }
            }
            let mut terms: Vec<([f64; 7], f64)> = vec![([0.0; 7], 1.0)];
            for &(d, m) in &dirs {
                let mut next = Vec::with_capacity(terms.len() * 4);
                for (z, w) in &terms {
                    for &(off, sw) in stencil(m) {
                        let mut z2 = *z;
                        z2[d] += off as f64 * step;
                        next.push((z2, w * sw));
                    }
                }
                terms = next;
            }
            let sum: f64 = terms.iter().map(|(z, w)| w * obs.eval(&chart.map(z, spec), spec)).sum();
            let deriv = (sum / step.powi(idx.len() as i32)).abs();
            let o = idx.len();
            if deriv > best[o] {
                best[o] = deriv;
            }
        }
        best
    });
    let mut per_order = vec![0.0; k + 1];
    for b in &per_point {
        for (o, v) in b.iter().enumerate() {
            per_order[o] = f64::max(per_order[o], *v);
        }
    }
    Ok(CkNorm {
        k,
        value: per_order.iter().cloned().fold(0.0, f64::max),
        per_order,
        step,
        n_points,
    })
}

// ---------------------------------------------------------------------------
// Correlations

/// Stream labels, so callers can reproduce the sample sets.
pub const CROSS_LABEL: &str = "correlation/cross";
pub const OTHER_LABEL: &str = "correlation/other";

/// Which side is sampled and flowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Sample `a`'s support, evaluate `b ∘ φ_t`.
    Forward,
    /// Sample `b`'s support, evaluate `a ∘ φ_{−t}` (by time reversal).
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub t: f64,
    /// `C_t(a, b) = |∫ a · b∘φ_t − ∫a ∫b|`.
    pub value: f64,
    /// The difference before the absolute value.
    pub signed: f64,
    pub stderr: f64,
    pub n: usize,
    pub cross: f64,
    pub int_a: f64,
    pub int_a_stderr: f64,
    pub int_b: f64,
    pub int_b_stderr: f64,
    pub failed: usize,
}

/// Fraction of failed trajectories tolerated before an estimate is refused.
pub const MAX_FAILURE_RATE: f64 = 0.01;

fn flow_endpoint(v: &PhasePoint, t: f64, spec: &MetricSpec) -> Option<PhasePoint> {
    if t == 0.0 {
        return Some(*v);
    }
    let opts = IntegratorOptions {
        output: Output::Endpoints,
        ..IntegratorOptions::default()
    };
    match integrate(v, t, spec, &opts) {
        Ok(tr) if tr.termination == Termination::Horizon => Some(tr.final_state()),
        _ => None,
    }
}

pub fn correlation(
    a: &Observable,
    b: &Observable,
    t: f64,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
) -> Result<CorrelationEstimate> {
    correlation_with(a, b, t, n, spec, seed, Direction::Forward)
}

pub fn correlation_with(
    a: &Observable,
    b: &Observable,
    t: f64,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    direction: Direction,
) -> Result<CorrelationEstimate> {
    if !(t >= 0.0) {
        return Err(Error::Precondition(format!("correlation time must be >= 0, got {t}")));
    }
    if n < 2 {
        return Err(Error::Precondition("need at least two samples".into()));
    }
    // `near` is sampled and paired with `far` after flowing.
    let (near, far) = match direction {
        Direction::Forward => (a, b),
        Direction::Backward => (b, a),
    };
    let prop = near.proposal(spec)?;
    let mass = prop.mass_fraction(spec);
    let pairs: Vec<Option<(f64, f64)>> = par_chunked(n, seed, CROSS_LABEL, |rng| {
        let v = prop.sample(rng, spec);
        let u = near.eval(&v, spec);
        if u == 0.0 {
            return Some((0.0, 0.0));
        }
        let w = match direction {
            Direction::Forward => flow_endpoint(&v, t, spec)?,
            Direction::Backward => flow_endpoint(&v.reversed(), t, spec)?.reversed(),
        };
        Some((u, far.eval(&w, spec)))
    });
    let failed = pairs.iter().filter(|p| p.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * n as f64 {
        return Err(Error::TooManyFailures { failed, total: n });
    }
    let ok: Vec<(f64, f64)> = pairs.into_iter().flatten().collect();
    let m = ok.len() as f64;

    let other = integral(far, n, spec, seed, OTHER_LABEL)?;
    let near_vals: Vec<f64> = ok.iter().map(|p| p.0).collect();
    let (near_mean, near_var) = mean_var(&near_vals);
    let int_near = mass * near_mean;
    let cross = mass * ok.iter().map(|(u, w)| u * w).sum::<f64>() / m;
    let z: Vec<f64> = ok.iter().map(|(u, w)| mass * u * (w - other.value)).collect();
    let (_, z_var) = mean_var(&z);
    let signed = cross - int_near * other.value;
    let stderr = (z_var / m + (int_near * other.stderr).powi(2)).sqrt();
    let near_stderr = mass * (near_var / m).sqrt();
    let (int_a, int_a_stderr, int_b, int_b_stderr) = match direction {
        Direction::Forward => (int_near, near_stderr, other.value, other.stderr),
        Direction::Backward => (other.value, other.stderr, int_near, near_stderr),
    };
    Ok(CorrelationEstimate {
        t,
        value: signed.abs(),
        signed,
        stderr,
        n: ok.len(),
        cross,
        int_a,
        int_a_stderr,
        int_b,
        int_b_stderr,
        failed,
    })
}

// ---------------------------------------------------------------------------
// Certificate

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateStatus {
    /// No overlap inside the protected window.
    Certified,
    /// Overlap found inside the protected window.
    Violated,
    /// The flow time lies beyond the window the escape bound protects.
    Unprotected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub eps: Option<f64>,
    pub t: f64,
    /// `1/(C₀ · scale(b))`, the longest protected flow time.
    pub protected_t: f64,
    pub n: usize,
    pub violations: usize,
    /// Sample indices of the first violating trajectories.
    pub violating: Vec<usize>,
    pub max_product: f64,
    pub failed: usize,
    pub status: CertificateStatus,
}

const LISTED_VIOLATIONS: usize = 100;

/// Counts samples of `supp b` whose backward orbit at time `t` lies in
/// `supp a`, i.e. overlaps of `a · b∘φ_t`.
pub fn certify(
    a: &Observable,
    b: &Observable,
    t: f64,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    c0: f64,
) -> Result<CertificateReport> {
    if !(c0 > 0.0 && t >= 0.0) {
        return Err(Error::Precondition("certificate needs c0 > 0 and t >= 0".into()));
    }
    let prop = b.proposal(spec)?;
    let products: Vec<Option<f64>> = par_chunked(n, seed, "certificate", |rng| {
        let u = prop.sample(rng, spec);
        let bv = b.eval(&u, spec);
        if bv == 0.0 {
            return Some(0.0);
        }
        let back = flow_endpoint(&u.reversed(), t, spec)?.reversed();
        Some(bv * a.eval(&back, spec))
    });
    let failed = products.iter().filter(|p| p.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * n as f64 {
        return Err(Error::TooManyFailures { failed, total: n });
    }
    let mut violating = Vec::new();
    let mut violations = 0;
    let mut max_product: f64 = 0.0;
    for (i, p) in products.iter().enumerate() {
        if let Some(p) = *p {
            if p > 0.0 {
                violations += 1;
                if violating.len() < LISTED_VIOLATIONS {
                    violating.push(i);
                }
            }
            max_product = max_product.max(p);
        }
    }
    let protected_t = match b.boundary_scale() {
        Some(eps) => 1.0 / (c0 * eps),
        None => 0.0,
    };
    let status = if t > protected_t * (1.0 + 1e-12) {
        CertificateStatus::Unprotected
    } else if violations == 0 {
        CertificateStatus::Certified
    } else {
        CertificateStatus::Violated
    };
    Ok(CertificateReport {
        eps: b.boundary_scale(),
        t,
        protected_t,
        n,
        violations,
        violating,
        max_product,
        failed,
        status,
    })
}

/// Certificate for `(a, b_ε)` at `window_factor / (C₀ ε)`.
pub fn nonmixing_certificate(
    eps: f64,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    c0: f64,
    ball: &BallSpec,
    window_factor: f64,
) -> Result<CertificateReport> {
    let b = build_b(eps, ball, spec)?;
    let a = build_a(ball, eps, spec)?;
    certify(&a, &b, window_factor / (c0 * eps), n, spec, seed, c0)
}

// ---------------------------------------------------------------------------
// Exponent bound

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaConfig {
    pub eps_list: Vec<f64>,
    pub k: usize,
    /// Samples for each `∫b_ε` and for `∫a`.
    pub n_integral: usize,
    pub n_norm: usize,
    /// Samples per ε for the certificate.
    pub n_certificate: usize,
    pub c0: f64,
    pub ball: BallSpec,
    /// Replace `b_ε` by the fixed-scale `b_{ε0}` (control).
    pub fixed_scale: Option<f64>,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            eps_list: vec![0.1, 0.05, 0.025, 0.0125],
            k: 1,
            n_integral: 100_000,
            n_norm: DEFAULT_NORM_POINTS,
            n_certificate: 10_000,
            c0: 1.0,
            ball: BallSpec::default(),
            fixed_scale: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub eps: f64,
    pub int_b: f64,
    pub int_b_stderr: f64,
    /// `m = (∫a)(∫b)`.
    pub m: f64,
    pub m_stderr: f64,
    pub norm_b: f64,
    /// `N_k = ‖a‖_{C^k} ‖b‖_{C^k}`.
    pub n_k: f64,
    /// `T = 1/(C₀ε)`.
    pub t: f64,
    /// `ln(N/m) / ln T`: the exponent forced at this ε alone (prefactor 1).
    pub implied_gamma: f64,
    pub certificate: CertificateStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaOutcome {
    /// Every ε certified; `gamma_max` bounds the exponent.
    Bounded,
    /// Some window is not protected: no obstruction at this scale.
    NoObstruction,
    /// A certificate failed inside its window.
    CertificateFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub k: usize,
    pub c0: f64,
    pub int_a: f64,
    pub int_a_stderr: f64,
    pub norm_a: f64,
    pub rows: Vec<GammaRow>,
    pub m_fit: FitResult,
    pub n_fit: FitResult,
    pub t_slope: f64,
    pub outcome: GammaOutcome,
    pub gamma_max: Option<f64>,
    pub gamma_ci: Option<(f64, f64)>,
}

pub fn gamma_upper_bound(cfg: &GammaConfig, spec: &MetricSpec, seed: u64) -> Result<GammaReport> {
    if cfg.eps_list.len() < 4 {
        return Err(Error::FitWindow(format!(
            "need at least 4 eps values, got {}",
            cfg.eps_list.len()
        )));
    }
    if !(cfg.c0 > 0.0) {
        return Err(Error::Precondition("c0 must be positive".into()));
    }
    let eps_max = cfg.eps_list.iter().cloned().fold(0.0, f64::max);
    let a = build_a(&cfg.ball, eps_max.max(cfg.fixed_scale.unwrap_or(0.0)), spec)?;
    let int_a = integral(&a, cfg.n_integral, spec, sub_seed(seed, "gamma/a", 0), "integral")?;
    let norm_a = estimate_ck_norm_with(&a, cfg.k, cfg.n_norm, spec, sub_seed(seed, "gamma/norm_a", 0))?.value;

    let mut rows = Vec::with_capacity(cfg.eps_list.len());
    for (i, &eps) in cfg.eps_list.iter().enumerate() {
        let b = build_b(cfg.fixed_scale.unwrap_or(eps), &cfg.ball, spec)?;
        let t = 1.0 / (cfg.c0 * eps);
        let cert = certify(
            &a,
            &b,
            t,
            cfg.n_certificate,
            spec,
            sub_seed(seed, "gamma/certificate", i as u64),
            cfg.c0,
        )?;
        let int_b = integral(
            &b,
            cfg.n_integral,
            spec,
            sub_seed(seed, "gamma/b", i as u64),
            "integral",
        )?;
        // Same normalised points for every ε.
        let norm_b = estimate_ck_norm_with(&b, cfg.k, cfg.n_norm, spec, sub_seed(seed, "gamma/norm_b", 0))?.value;
        let m = int_a.value * int_b.value;
        let m_stderr = m * ((int_a.stderr / int_a.value).powi(2) + (int_b.stderr / int_b.value).powi(2)).sqrt();
        let n_k = norm_a * norm_b;
        rows.push(GammaRow {
            eps,
            int_b: int_b.value,
            int_b_stderr: int_b.stderr,
            m,
            m_stderr,
            norm_b,
            n_k,
            t,
            implied_gamma: (n_k / m).ln() / t.ln(),
            certificate: cert.status,
        });
    }

    let m_fit = power_law_fit(
        &rows
            .iter()
            .map(|r| FitPoint::new(r.eps, r.m, Some(r.m_stderr)))
            .collect::<Vec<_>>(),
    )?;
    let n_fit = power_law_fit(
        &rows
            .iter()
            .map(|r| FitPoint::new(r.eps, r.n_k, None))
            .collect::<Vec<_>>(),
    )?;
    let t_slope = -1.0;

    let outcome = if rows.iter().any(|r| r.certificate == CertificateStatus::Violated) {
        GammaOutcome::CertificateFailed
    } else if rows.iter().any(|r| r.certificate == CertificateStatus::Unprotected) {
        GammaOutcome::NoObstruction
    } else {
        GammaOutcome::Bounded
    };
    let (gamma_max, gamma_ci) = if outcome == GammaOutcome::Bounded {
        let g = (m_fit.exponent - n_fit.exponent) / -t_slope;
        let lo = (m_fit.ci_low - n_fit.ci_high) / -t_slope;
        let hi = (m_fit.ci_high - n_fit.ci_low) / -t_slope;
        (Some(g), Some((lo, hi)))
    } else {
        (None, None)
    };
    Ok(GammaReport {
        k: cfg.k,
        c0: cfg.c0,
        int_a: int_a.value,
        int_a_stderr: int_a.stderr,
        norm_a,
        rows,
        m_fit,
        n_fit,
        t_slope,
        outcome,
        gamma_max,
        gamma_ci,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        assert_eq!(Profile::Bump.eval(0.0), 1.0);
        assert_eq!(Profile::Bump.eval(1.0), 0.0);
        assert_eq!(Profile::Bump.eval(1.5), 0.0);
        let p = Profile::Plateau { inner: 0.7 };
        assert_eq!(p.eval(0.5), 1.0);
        assert_eq!(p.eval(1.0), 0.0);
        assert!((p.eval(0.85) - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..=100 {
            let v = p.eval(i as f64 / 100.0);
            assert!((0.0..=1.0).contains(&v) && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn multi_index_counts() {
        // C(7 + m − 1, m) multisets of each order
        assert_eq!(multi_indices(7, 1).len(), 7);
        assert_eq!(multi_indices(7, 2).len(), 7 + 28);
        assert_eq!(multi_indices(7, 3).len(), 7 + 28 + 84);
    }

    #[test]
    fn stencils_differentiate_polynomials() {
        // the m-th stencil applied to t^m / m! gives 1
        let fact = [1.0, 1.0, 2.0, 6.0];
        for m in 1..=3 {
            let h = 0.1;
            let s: f64 = stencil(m)
                .iter()
                .map(|&(o, w)| w * (o as f64 * h).powi(m as i32) / fact[m])
                .sum();
            assert!((s / h.powi(m as i32) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chart_keeps_unit_speed_and_rotates_the_fiber() {
        let spec = MetricSpec::with_eta(0.3);
        let v = PhasePoint::from_frame(
            ManifoldPoint::new(0.4, 0.2, 0.3, 0.1, &spec),
            [0.1, 0.2, 0.9, 0.3],
            &spec,
        );
        let chart = Chart::new(&v, &spec);
        for e in &chart.perp {
            let d: f64 = (0..4).map(|i| e[i] * chart.w[i]).sum();
            assert!(d.abs() < 1e-14);
        }
        let z = [0.01, -0.02, 0.03, 0.0, 0.2, -0.1, 0.05];
        let u = chart.map(&z, &spec);
        assert!((u.speed(&spec) - 1.0).abs() < 1e-12);
        assert!((u.point.x - (0.4 + 0.005)).abs() < 1e-14);
        assert_eq!(chart.map(&[0.0; 7], &spec).point, v.point);
    }

    #[test]
    fn constant_norm_is_the_constant() {
        let spec = MetricSpec::default();
        let c = Observable::Constant { value: 0.3 };
        for k in 1..=3 {
            let n = estimate_ck_norm_with(&c, k, 50, &spec, 1).unwrap();
            assert_eq!(n.value, 0.3);
            assert!(n.per_order[1..].iter().all(|d| *d == 0.0));
        }
        assert!(estimate_ck_norm(&c, 4, &spec, 1).is_err());
    }

    #[test]
    fn preconditions() {
        let spec = MetricSpec::default();
        let ball = BallSpec::default();
        assert!(build_b(1.5, &ball, &spec).is_err());
        let deep = BallSpec {
            center: [0.1, 0.5, 0.5, 0.5],
            radius: 0.05,
        };
        assert!(matches!(build_a(&deep, 0.3, &spec), Err(Error::RegionOverlap(_))));
    }
}
