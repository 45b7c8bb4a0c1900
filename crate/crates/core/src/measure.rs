//! Liouville sampling, Monte Carlo volumes and power-law fits.
//!
//! Volumes are fractions of the total Liouville mass of the chart. Every
//! region is estimated by drawing from a box-shaped proposal whose mass
//! fraction is known in closed form and counting hits; the proposal is
//! deliberately wider than the region (by `margin`) so the hit rate is a
//! genuine Monte Carlo quantity.
//!
//! Base points are drawn with density `∝ x^k h(x, y1)` (`k = 3` is the
//! Liouville density `√det g = 2 x³ h`), fiber directions uniformly on the
//! unit sphere of the orthonormal frame, optionally capped in the cusp-plane
//! component `c = |(w0, w1)|`. For a uniform point on S³, `c²` is uniform
//! on `[0, 1]`, which gives both the cap sampler and its mass in closed form.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boundary::boundary_state;
use crate::error::{Error, Result};
use crate::flow::PhasePoint;
use crate::geometry::{metric_diagonal, x_of_f, ManifoldPoint, MetricSpec, LAMBDA_NORM};
use crate::seed::{par_chunked, stream, StreamRng};

/// Footprint density exponent: `∝ x^k` in `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDensity {
    Liouville,
    Power(f64),
}

impl BaseDensity {
    pub fn exponent(self) -> f64 {
        match self {
            BaseDensity::Liouville => 3.0,
            BaseDensity::Power(k) => k,
        }
    }
}

/// A product box in `(x, τ, y1, y2)` times a capped fiber.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub x_lo: f64,
    pub x_hi: f64,
    /// Cap on the cusp-plane frame component of the direction (1 = no cap).
    pub c_max: f64,
    /// `(lo, hi)` windows; `None` means the full period.
    pub tau: Option<(f64, f64)>,
    pub y1: Option<(f64, f64)>,
    pub y2: Option<(f64, f64)>,
    pub density: BaseDensity,
}

impl Proposal {
    pub fn band(x_lo: f64, x_hi: f64, c_max: f64, density: BaseDensity) -> Self {
        Proposal {
            x_lo,
            x_hi,
            c_max,
            tau: None,
            y1: None,
            y2: None,
            density,
        }
    }

    fn check(&self, spec: &MetricSpec) -> Result<()> {
        let ok = self.x_lo >= spec.x_floor
            && self.x_hi <= spec.x_max
            && self.x_lo < self.x_hi
            && self.c_max > 0.0
            && self.c_max <= 1.0
            && self.density.exponent() > -1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!("proposal outside the chart: {self:?}")))
        }
    }

    /// Fraction of the total mass (under the same base density) carried by
    /// this proposal.
    pub fn mass_fraction(&self, spec: &MetricSpec) -> f64 {
        let k = self.density.exponent();
        let moment = |m: f64| (self.x_hi.powf(m) - self.x_lo.powf(m)) / m;
        let l1 = spec.torus_sides[0];
        let (a, b) = self.y1.unwrap_or((0.0, l1));
        let w = 2.0 * PI / l1;
        // ∫∫ x^k (1 + η x⁴ cos(w y1)) dx dy1 over the box
        let xy1 = moment(k + 1.0) * (b - a) + spec.eta * moment(k + 5.0) * ((w * b).sin() - (w * a).sin()) / w;
        let total = spec.x_max.powf(k + 1.0) / (k + 1.0) * l1;
        let frac = |win: Option<(f64, f64)>, period: f64| win.map_or(1.0, |(lo, hi)| (hi - lo) / period);
        xy1 / total * frac(self.tau, spec.tau_period) * frac(self.y2, spec.torus_sides[1]) * self.c_max * self.c_max
    }

    pub fn sample(&self, rng: &mut StreamRng, spec: &MetricSpec) -> PhasePoint {
        let m = self.density.exponent() + 1.0;
        let (lo, hi) = (self.x_lo.powf(m), self.x_hi.powf(m));
        let h_bound = 1.0 + spec.eta * self.x_hi.powi(4);
        let window = |rng: &mut StreamRng, win: Option<(f64, f64)>, period: f64| match win {
            Some((a, b)) => a + (b - a) * rng.random::<f64>(),
            None => period * rng.random::<f64>(),
        };
        let point = loop {
            let x = (lo + (hi - lo) * rng.random::<f64>()).powf(1.0 / m);
            let tau = window(rng, self.tau, spec.tau_period);
            let y1 = window(rng, self.y1, spec.torus_sides[0]);
            let y2 = window(rng, self.y2, spec.torus_sides[1]);
            let h = metric_diagonal(x, y1, spec)[2];
            if spec.eta == 0.0 || rng.random::<f64>() * h_bound < h {
                break ManifoldPoint::new(x, tau, y1, y2, spec);
            }
        };
        let c = self.c_max * rng.random::<f64>().sqrt();
        let s = (1.0 - c * c).sqrt();
        let (a, b) = (2.0 * PI * rng.random::<f64>(), 2.0 * PI * rng.random::<f64>());
        PhasePoint::from_frame(point, [c * a.cos(), c * a.sin(), s * b.cos(), s * b.sin()], spec)
    }
}

/// Regions of phase space (all are unions of unit tangent vectors).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegionSpec {
    /// `f ≤ ρ`, i.e. `x ≤ ρ/√(2π²)`.
    ERho { rho: f64 },
    /// `f ≤ ε` and `r ≤ ε²`.
    VEps { eps: f64 },
    /// ε-neighbourhood of the boundary; the same set as `ERho { rho: eps }`.
    NEps { eps: f64 },
    /// Ball of the metric frozen at the centre, periodic in `τ, y`.
    Ball { center: ManifoldPoint, radius: f64 },
    /// `x_lo ≤ x ≤ x_hi`.
    Tube { x_lo: f64, x_hi: f64 },
}

/// Periodic difference reduced to `[-period/2, period/2)`.
pub(crate) fn periodic_delta(a: f64, b: f64, period: f64) -> f64 {
    (a - b + 0.5 * period).rem_euclid(period) - 0.5 * period
}

/// Frozen-metric distance from the centre of a ball region.
pub(crate) fn ball_distance(center: &ManifoldPoint, p: &ManifoldPoint, spec: &MetricSpec) -> f64 {
    let d = metric_diagonal(center.x, center.y1, spec);
    let dx = p.x - center.x;
    let dt = periodic_delta(p.tau, center.tau, spec.tau_period);
    let d1 = periodic_delta(p.y1, center.y1, spec.torus_sides[0]);
    let d2 = periodic_delta(p.y2, center.y2, spec.torus_sides[1]);
    (d[0] * dx * dx + d[1] * dt * dt + d[2] * d1 * d1 + d[3] * d2 * d2).sqrt()
}

impl RegionSpec {
    pub fn label(&self) -> &'static str {
        match self {
            RegionSpec::ERho { .. } => "e_rho",
            RegionSpec::VEps { .. } => "v_eps",
            RegionSpec::NEps { .. } => "n_eps",
            RegionSpec::Ball { .. } => "ball",
            RegionSpec::Tube { .. } => "tube",
        }
    }

    pub fn contains(&self, v: &PhasePoint, spec: &MetricSpec) -> bool {
        match *self {
            RegionSpec::ERho { rho: e } | RegionSpec::NEps { eps: e } => boundary_state(v, spec).f <= e,
            RegionSpec::VEps { eps } => {
                let b = boundary_state(v, spec);
                b.f <= eps && b.r <= eps * eps
            }
            RegionSpec::Ball { center, radius } => ball_distance(&center, &v.point, spec) <= radius,
            RegionSpec::Tube { x_lo, x_hi } => v.point.x >= x_lo && v.point.x <= x_hi,
        }
    }

    /// A proposal containing the region, enlarged by `margin ≥ 1`.
    pub fn proposal(&self, margin: f64, density: BaseDensity, spec: &MetricSpec) -> Result<Proposal> {
        spec.validate()?;
        if !(margin >= 1.0) {
            return Err(Error::Precondition(format!(
                "proposal margin must be >= 1, got {margin}"
            )));
        }
        let clip_hi = |x: f64| x.min(spec.x_max);
        let p = match *self {
            RegionSpec::ERho { rho: e } | RegionSpec::NEps { eps: e } => {
                self.check_scale(e, spec)?;
                Proposal::band(spec.x_floor, clip_hi(margin * x_of_f(e)), 1.0, density)
            }
            RegionSpec::VEps { eps } => {
                self.check_scale(eps, spec)?;
                let c_cap = eps * eps / LAMBDA_NORM;
                if c_cap > 1.0 {
                    return Err(Error::Precondition(format!(
                        "eps = {eps} too large: r <= eps^2 is no constraint"
                    )));
                }
                Proposal::band(
                    spec.x_floor,
                    clip_hi(margin * x_of_f(eps)),
                    (margin * c_cap).min(1.0),
                    density,
                )
            }
            RegionSpec::Ball { center, radius } => {
                let d = metric_diagonal(center.x, center.y1, spec);
                let half = |scale: f64, period: f64| {
                    let w = margin * radius / scale;
                    (w < 0.5 * period).then_some(w)
                };
                let x_lo = (center.x - margin * radius / 2.0).max(spec.x_floor);
                let x_hi = center.x + margin * radius / 2.0;
                if !(radius > 0.0) || center.x - radius / 2.0 < spec.x_floor || center.x + radius / 2.0 > spec.x_max {
                    return Err(Error::Precondition(format!(
                        "ball of radius {radius} at x = {} leaves the chart",
                        center.x
                    )));
                }
                let window = |c: f64, w: Option<f64>| w.map(|w| (c - w, c + w));
                Proposal {
                    x_lo,
                    x_hi: clip_hi(x_hi),
                    c_max: 1.0,
                    tau: window(center.tau, half(d[1].sqrt(), spec.tau_period)),
                    y1: window(center.y1, half(d[2].sqrt(), spec.torus_sides[0])),
                    y2: window(center.y2, half(d[3].sqrt(), spec.torus_sides[1])),
                    density,
                }
            }
            RegionSpec::Tube { x_lo, x_hi } => {
                if !(x_lo >= spec.x_floor && x_lo < x_hi && x_hi <= spec.x_max) {
                    return Err(Error::Precondition(format!("tube [{x_lo}, {x_hi}] outside the chart")));
                }
                let mid = 0.5 * (x_lo + x_hi);
                let half = 0.5 * margin * (x_hi - x_lo);
                Proposal::band((mid - half).max(spec.x_floor), clip_hi(mid + half), 1.0, density)
            }
        };
        p.check(spec)?;
        Ok(p)
    }

    fn check_scale(&self, e: f64, spec: &MetricSpec) -> Result<()> {
        let x = x_of_f(e);
        if e > 0.0 && x > spec.x_floor && x <= spec.x_max {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{} parameter {e} maps to x = {x} outside ({}, {}]",
                self.label(),
                spec.x_floor,
                spec.x_max
            )))
        }
    }
}

/// `n` independent Liouville-distributed points of `region`.
pub fn liouville_sample(region: &RegionSpec, n: usize, spec: &MetricSpec, seed: u64) -> Result<Vec<PhasePoint>> {
    liouville_sample_with(region, n, spec, seed, BaseDensity::Liouville)
}

pub fn liouville_sample_with(
    region: &RegionSpec,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    density: BaseDensity,
) -> Result<Vec<PhasePoint>> {
    let proposal = region.proposal(1.0, density, spec)?;
    // Probe the acceptance rate before committing to rejection sampling.
    let mut probe = stream(seed, "liouville/probe", 0);
    let trials = 10_000;
    let hits = (0..trials)
        .filter(|_| region.contains(&proposal.sample(&mut probe, spec), spec))
        .count();
    if hits == 0 {
        return Err(Error::Precondition(format!("{} region appears empty", region.label())));
    }
    let rate = hits as f64 / trials as f64;
    if rate < 1e-6 {
        log::warn!("rejection efficiency {rate:e} for region {}", region.label());
    }
    let label = format!("liouville/{}", region.label());
    Ok(par_chunked(n, seed, &label, |rng| loop {
        let v = proposal.sample(rng, spec);
        if region.contains(&v, spec) {
            break v;
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub param: f64,
    pub volume: f64,
    pub stderr: f64,
    pub n: usize,
    pub hits: usize,
}

impl VolumeEstimate {
    pub fn rel_stderr(&self) -> f64 {
        self.stderr / self.volume
    }
}

/// Proposal enlargement used by the volume estimators.
pub const VOLUME_MARGIN: f64 = 2.0;

/// Hit-or-miss estimate of the normalised mass of `region`.
pub fn estimate_volume(
    region: &RegionSpec,
    param: f64,
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    density: BaseDensity,
) -> Result<VolumeEstimate> {
    if n == 0 {
        return Err(Error::Precondition("sample count must be positive".into()));
    }
    let proposal = region.proposal(VOLUME_MARGIN, density, spec)?;
    let label = format!("volume/{}/{param:e}", region.label());
    let hits = par_chunked(n, seed, &label, |rng| {
        region.contains(&proposal.sample(rng, spec), spec)
    })
    .into_iter()
    .filter(|&h| h)
    .count();
    let mass = proposal.mass_fraction(spec);
    let p = hits as f64 / n as f64;
    Ok(VolumeEstimate {
        param,
        volume: mass * p,
        stderr: mass * (p * (1.0 - p) / n as f64).sqrt(),
        n,
        hits,
    })
}

/// Which family of regions a scaling run sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionFamily {
    ERho,
    VEps,
    NEps,
    /// A fixed ball (the parameter is ignored); a constant-volume control.
    FixedBall,
}

impl RegionFamily {
    pub fn region(self, param: f64, spec: &MetricSpec) -> RegionSpec {
        match self {
            RegionFamily::ERho => RegionSpec::ERho { rho: param },
            RegionFamily::VEps => RegionSpec::VEps { eps: param },
            RegionFamily::NEps => RegionSpec::NEps { eps: param },
            RegionFamily::FixedBall => RegionSpec::Ball {
                center: ManifoldPoint::new(0.7, 0.5, 0.5, 0.5, spec),
                radius: 0.15,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub family: RegionFamily,
    pub points: Vec<VolumeEstimate>,
    pub fit: FitResult,
}

/// Largest per-point relative standard error tolerated before `n` is doubled.
pub const MAX_REL_STDERR: f64 = 0.05;
const MAX_WIDENINGS: u32 = 8;
/// Minimum span of a scaling sweep, in decades.
pub const MIN_DECADES: f64 = 1.5;

fn check_sweep(params: &[f64]) -> Result<()> {
    if params.len() < 4 {
        return Err(Error::FitWindow(format!(
            "need at least 4 parameter values, got {}",
            params.len()
        )));
    }
    let (lo, hi) = params
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    if !(lo > 0.0) {
        return Err(Error::FitWindow("parameters must be positive".into()));
    }
    let decades = (hi / lo).log10();
    if decades < MIN_DECADES - 1e-9 {
        return Err(Error::FitWindow(format!(
            "parameters span {decades:.2} decades, need {MIN_DECADES}"
        )));
    }
    Ok(())
}

pub fn volume_scaling(
    family: RegionFamily,
    params: &[f64],
    n: usize,
    spec: &MetricSpec,
    seed: u64,
) -> Result<ScalingResult> {
    volume_scaling_with(family, params, n, spec, seed, BaseDensity::Liouville)
}

pub fn volume_scaling_with(
    family: RegionFamily,
    params: &[f64],
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    density: BaseDensity,
) -> Result<ScalingResult> {
    check_sweep(params)?;
    let mut points = Vec::with_capacity(params.len());
    for &param in params {
        let region = family.region(param, spec);
        let mut est = estimate_volume(&region, param, n, spec, seed, density)?;
        let mut widenings = 0;
        while !(est.rel_stderr() <= MAX_REL_STDERR) && widenings < MAX_WIDENINGS {
            est = estimate_volume(&region, param, 2 * est.n, spec, seed, density)?;
            widenings += 1;
        }
        if !(est.rel_stderr() <= MAX_REL_STDERR) {
            log::warn!(
                "{} at {param}: relative stderr {:.3} after {widenings} widenings",
                region.label(),
                est.rel_stderr()
            );
        }
        points.push(est);
    }
    let fit = power_law_fit(
        &points
            .iter()
            .map(|p| FitPoint::new(p.param, p.volume, Some(p.stderr)))
            .collect::<Vec<_>>(),
    )?;
    Ok(ScalingResult { family, points, fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodimensionResult {
    pub scaling: ScalingResult,
    pub codimension: f64,
    /// Codimension established to exceed 2 (lower CI bound above
    /// `2 + CODIM_MARGIN`), the almost-polarity criterion.
    pub exceeds_two: bool,
}

/// A codimension within this distance of 2 is not reported as exceeding 2.
pub const CODIM_MARGIN: f64 = 0.1;

pub fn minkowski_codimension(eps_list: &[f64], n: usize, spec: &MetricSpec, seed: u64) -> Result<CodimensionResult> {
    minkowski_codimension_with(eps_list, n, spec, seed, BaseDensity::Liouville)
}

pub fn minkowski_codimension_with(
    eps_list: &[f64],
    n: usize,
    spec: &MetricSpec,
    seed: u64,
    density: BaseDensity,
) -> Result<CodimensionResult> {
    let scaling = volume_scaling_with(RegionFamily::NEps, eps_list, n, spec, seed, density)?;
    let codimension = scaling.fit.exponent;
    let exceeds_two = scaling.fit.ci_low > 2.0 + CODIM_MARGIN;
    Ok(CodimensionResult {
        scaling,
        codimension,
        exceeds_two,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub param: f64,
    pub value: f64,
    pub stderr: Option<f64>,
}

impl FitPoint {
    pub fn new(param: f64, value: f64, stderr: Option<f64>) -> Self {
        FitPoint { param, value, stderr }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub exponent: f64,
    /// `ln` of the prefactor: `value ≈ exp(intercept) · param^exponent`.
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_points: usize,
    /// RMS of the log residuals.
    pub residual_rms: f64,
}

impl FitResult {
    pub fn predict(&self, param: f64) -> f64 {
        (self.intercept + self.exponent * param.ln()).exp()
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const DEFAULT_FIT_SEED: u64 = 0x5eed_f17;

/// Weighted least squares of `ln value` on `ln param`, with a 95% bootstrap
/// interval for the exponent.
pub fn power_law_fit(points: &[FitPoint]) -> Result<FitResult> {
    power_law_fit_seeded(points, DEFAULT_FIT_SEED)
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for i in 0..x.len() {
        sxy += w[i] * (x[i] - mx) * (y[i] - my);
        sxx += w[i] * (x[i] - mx) * (x[i] - mx);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

pub fn power_law_fit_seeded(points: &[FitPoint], seed: u64) -> Result<FitResult> {
    if points.len() < 4 {
        return Err(Error::FitWindow(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.value > 0.0 && p.value.is_finite()) {
            return Err(Error::NonPositive {
                param: p.param,
                value: p.value,
            });
        }
        if !(p.param > 0.0) {
            return Err(Error::NonPositive {
                param: p.param,
                value: p.value,
            });
        }
    }
    let x: Vec<f64> = points.iter().map(|p| p.param.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    if x.iter().all(|&v| v == x[0]) {
        return Err(Error::FitWindow("all parameters are equal".into()));
    }
    // Log-space standard errors; weights only if every point has one.
    let sig: Option<Vec<f64>> = points
        .iter()
        .map(|p| p.stderr.filter(|s| *s > 0.0).map(|s| s / p.value))
        .collect();
    let w: Vec<f64> = match &sig {
        Some(s) => s.iter().map(|s| 1.0 / (s * s)).collect(),
        None => vec![1.0; points.len()],
    };
    let (slope, intercept) = weighted_line(&x, &y, &w);
    let fitted: Vec<f64> = x.iter().map(|xi| intercept + slope * xi).collect();
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let residual_rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();

    let mut rng = stream(seed, "power_law_fit", 0);
    let mut slopes: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let yb: Vec<f64> = match &sig {
                Some(s) => fitted
                    .iter()
                    .zip(s)
                    .map(|(f, s)| f + s * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                None => fitted
                    .iter()
                    .map(|f| f + resid[rng.random_range(0..resid.len())])
                    .collect(),
            };
            weighted_line(&x, &yb, &w).0
        })
        .collect();
    slopes.sort_by(f64::total_cmp);
    let ci_low = percentile(&slopes, 0.025).min(slope);
    let ci_high = percentile(&slopes, 0.975).max(slope);
    Ok(FitResult {
        exponent: slope,
        intercept,
        ci_low,
        ci_high,
        n_points: points.len(),
        residual_rms,
    })
}

/// Draws a direction uniformly on S³ (used by tests and controls).
pub fn uniform_s3(rng: &mut StreamRng) -> [f64; 4] {
    loop {
        let w: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = w.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-12 {
            break w.map(|c| c / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(param: &[f64], f: impl Fn(f64) -> f64) -> Vec<FitPoint> {
        param.iter().map(|&p| FitPoint::new(p, f(p), None)).collect()
    }

    #[test]
    fn exact_power_law() {
        let ps = [0.1, 0.2, 0.4, 0.8, 1.6];
        let fit = power_law_fit(&exact(&ps, |p| p.powi(4))).unwrap();
        assert!((fit.exponent - 4.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-11);
        assert!(fit.ci_low <= fit.exponent && fit.exponent <= fit.ci_high);
        let fit = power_law_fit(&exact(&ps, |_| 7.0)).unwrap();
        assert!(fit.exponent.abs() < 1e-12);
        assert!((fit.predict(0.3) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn fit_errors() {
        let ps = [0.1, 0.2, 0.4];
        assert!(matches!(power_law_fit(&exact(&ps, |p| p)), Err(Error::FitWindow(_))));
        let ps = [0.1, 0.2, 0.4, 0.8];
        assert!(matches!(
            power_law_fit(&exact(&ps, |p| p - 0.2)),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn noisy_fit_covers_the_exponent() {
        let ps: Vec<f64> = (0..8).map(|i| 0.05 * 2f64.powi(i)).collect();
        let mut inside = 0;
        let trials = 200;
        for seed in 0..trials {
            let mut rng = stream(seed, "noise", 0);
            let pts: Vec<FitPoint> = ps
                .iter()
                .map(|&p| {
                    let e: f64 = rng.sample(StandardNormal);
                    FitPoint::new(p, p.powi(4) * (1.0 + 0.01 * e), None)
                })
                .collect();
            let fit = power_law_fit(&pts).unwrap();
            if (3.9..=4.1).contains(&fit.exponent) {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.95 * trials as f64, "{inside}/{trials}");
    }

    #[test]
    fn proposal_mass_matches_closed_form() {
        let spec = MetricSpec::default();
        let p = Proposal::band(spec.x_floor, 0.5, 0.5, BaseDensity::Liouville);
        let expect = (0.5f64.powi(4) - spec.x_floor.powi(4)) * 0.25;
        assert!((p.mass_fraction(&spec) - expect).abs() < 1e-15);
        // The η term integrates to zero over a full period of y1.
        let perturbed = MetricSpec::with_eta(0.5);
        assert!((p.mass_fraction(&perturbed) - expect).abs() < 1e-15);
    }

    #[test]
    fn windowed_mass_matches_quadrature() {
        let spec = MetricSpec::with_eta(0.5);
        let p = Proposal {
            x_lo: 0.6,
            x_hi: 0.8,
            c_max: 1.0,
            tau: Some((0.2, 0.5)),
            y1: Some((0.1, 0.3)),
            y2: None,
            density: BaseDensity::Liouville,
        };
        // midpoint rule on the (x, y1) box
        let m = 2000;
        let mut sum = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = 0.6 + 0.2 * (i as f64 + 0.5) / m as f64;
                let y = 0.1 + 0.2 * (j as f64 + 0.5) / m as f64;
                sum += 2.0 * x.powi(3) * metric_diagonal(x, y, &spec)[2];
            }
        }
        let integral = sum * (0.2 / m as f64) * (0.2 / m as f64) * 0.3;
        assert!((p.mass_fraction(&spec) - integral / spec.base_mass()).abs() < 1e-9);
    }

    #[test]
    fn regions_reject_bad_parameters() {
        let spec = MetricSpec::default();
        assert!(RegionSpec::ERho { rho: 10.0 }
            .proposal(1.0, BaseDensity::Liouville, &spec)
            .is_err());
        assert!(RegionSpec::VEps { eps: 0.0 }
            .proposal(1.0, BaseDensity::Liouville, &spec)
            .is_err());
        assert!(RegionSpec::Tube { x_lo: 0.5, x_hi: 0.4 }
            .proposal(1.0, BaseDensity::Liouville, &spec)
            .is_err());
        let ball = RegionSpec::Ball {
            center: ManifoldPoint::new(0.05, 0.0, 0.0, 0.0, &spec),
            radius: 0.2,
        };
        assert!(ball.proposal(1.0, BaseDensity::Liouville, &spec).is_err());
    }

    #[test]
    fn sweep_precondition() {
        assert!(check_sweep(&[0.4, 0.2, 0.1, 0.05]).is_err());
        assert!(check_sweep(&[0.1]).is_err());
        assert!(check_sweep(&[0.4, 0.2, 0.1, 0.05, 0.025, 0.0125]).is_ok());
    }
}
