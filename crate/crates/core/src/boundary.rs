//! Near-boundary quantities and the experiments built on them.
//!
//! For a unit vector `v` at a point with pinching coordinate `x`:
//!
//! ```text
//!     f(v) = ℓ^{1/2} = √(2π²) x,       r(v) = √(⟨v,λ⟩² + ⟨v,Jλ⟩²) = ‖λ‖ c,
//! ```
//!
//! where `c = |(w0, w1)|` is the cusp-plane part of `v` in the orthonormal
//! frame. Along a geodesic `d(c²)/dt = h_x vx |vy|²`, so the drift of `r`
//! comes from the torus coupling only and is `O(x³) = O(f³)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{escape_time_with, integrate, EscapeKind, IntegratorOptions, Output, PhasePoint};
use crate::geometry::{
    apply_j, christoffel_at, f_of_x, grad_sqrt_length, inner, norm, to_frame, x_of_f, ManifoldPoint, MetricSpec,
    TangentVector, LAMBDA_NORM,
};
use crate::measure::{liouville_sample, power_law_fit, FitPoint, FitResult, RegionSpec};
use crate::seed::{par_indexed, stream, sub_seed};

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryState {
    pub f: f64,
    pub r: f64,
}

pub fn boundary_state(v: &PhasePoint, spec: &MetricSpec) -> BoundaryState {
    let w = to_frame(&v.point, &v.velocity, spec);
    BoundaryState {
        f: f_of_x(v.point.x),
        r: LAMBDA_NORM * w[0].hypot(w[1]),
    }
}

/// Exact `dr/dt` along the geodesic through `v`.
///
/// At `c = 0` the one-sided rate is returned.
pub fn drift_rate(v: &PhasePoint, spec: &MetricSpec) -> f64 {
    let p = &v.point;
    let w = to_frame(p, &v.velocity, spec);
    let c = w[0].hypot(w[1]);
    let two_pi = 2.0 * std::f64::consts::PI;
    let phase = two_pi * p.y1 / spec.torus_sides[0];
    let h = 1.0 + spec.eta * p.x.powi(4) * phase.cos();
    let h_x = 4.0 * spec.eta * p.x.powi(3) * phase.cos();
    let s2 = w[2] * w[2] + w[3] * w[3];
    let cos_theta = if c > 0.0 { w[0] / c } else { 1.0 };
    // dc/dt = h_x vx |vy|² / (2c), vx = w0/2, |vy|² = s²/h
    LAMBDA_NORM * 0.25 * h_x * cos_theta * s2 / h
}

/// `n` Liouville-distributed unit vectors in `V_ε = {f ≤ ε, r ≤ ε²}`.
pub fn sample_v_eps(eps: f64, n: usize, spec: &MetricSpec, seed: u64) -> Result<Vec<PhasePoint>> {
    if !(eps > 0.0 && x_of_f(eps) > spec.x_floor && x_of_f(eps) <= spec.x_max) {
        return Err(Error::Precondition(format!(
            "eps = {eps} needs x_floor < f^-1(eps) <= x_max"
        )));
    }
    liouville_sample(&RegionSpec::VEps { eps }, n, spec, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub bins: usize,
    pub n_per_bin: usize,
    /// Output spacing of the sampled segments; also the difference step.
    pub spacing: f64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            f_min: 1e-3,
            f_max: 0.5,
            bins: 8,
            n_per_bin: 200,
            spacing: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub f: f64,
    pub r: f64,
    /// `r′` by the five-point central difference.
    pub r_prime: f64,
    /// `r′` from the closed-form rate, for comparison.
    pub r_prime_exact: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftBin {
    pub f_lo: f64,
    pub f_hi: f64,
    /// Geometric centre of the bin.
    pub f: f64,
    pub n: usize,
    pub mean_abs_r_prime: f64,
    pub stderr: f64,
    pub max_abs_r_prime: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub bins: Vec<DriftBin>,
    pub samples: Vec<DriftSample>,
    /// Fit of mean `|r′|` against `f`; absent when the drift vanishes.
    pub fit: Option<FitResult>,
    /// Every `|r′|` is below [`DRIFT_FLOOR`]: the product model.
    pub degenerate: bool,
    pub max_abs_r_prime: f64,
    /// `max |r′| / f³` over all samples.
    pub b_estimate: f64,
    pub failed: usize,
}

/// Drift magnitudes below this are treated as exact conservation.
pub const DRIFT_FLOOR: f64 = 1e-10;
const MIN_VALID_BINS: usize = 4;
const MIN_DRIFT_DECADES: f64 = 2.0;
const MIN_BIN_COUNT: usize = 10;

fn drift_options(spacing: f64) -> IntegratorOptions {
    IntegratorOptions {
        rtol: 1e-12,
        atol: 1e-30,
        output: Output::Uniform(spacing),
        ..IntegratorOptions::default()
    }
}

/// Samples short segments at log-uniform depths with `r ≤ f²` and measures
/// `r′` by finite differences.
pub fn drift_experiment(cfg: &DriftConfig, spec: &MetricSpec, seed: u64) -> Result<DriftResult> {
    spec.validate()?;
    if !(cfg.f_min > 0.0 && cfg.f_min < cfg.f_max && x_of_f(cfg.f_max) < spec.x_max && cfg.bins > 0) {
        return Err(Error::Precondition(format!("bad drift depth range {cfg:?}")));
    }
    if x_of_f(cfg.f_min) <= spec.x_floor {
        return Err(Error::Precondition("f_min is below the floor guard".into()));
    }
    let ratio = (cfg.f_max / cfg.f_min).powf(1.0 / cfg.bins as f64);
    let total = cfg.bins * cfg.n_per_bin;
    let opts = drift_options(cfg.spacing);

    let raw: Vec<Result<Option<DriftSample>>> = par_indexed(total, |i| {
        let bin = i / cfg.n_per_bin;
        let mut rng = stream(seed, "drift", i as u64);
        let lo = cfg.f_min * ratio.powi(bin as i32);
        let f0 = lo * ratio.powf(rng.random::<f64>());
        let point = ManifoldPoint::new(x_of_f(f0), rng.random(), rng.random(), rng.random(), spec);
        let c = f0 * f0 / LAMBDA_NORM * rng.random::<f64>().sqrt();
        let s = (1.0 - c * c).sqrt();
        let (a, b) = (
            std::f64::consts::TAU * rng.random::<f64>(),
            std::f64::consts::TAU * rng.random::<f64>(),
        );
        let v0 = PhasePoint::from_frame(point, [c * a.cos(), c * a.sin(), s * b.cos(), s * b.sin()], spec);
        let traj = integrate(&v0, 4.0 * cfg.spacing, spec, &opts)?;
        if traj.samples.len() != 5 || !traj.events.is_empty() || !traj.stats.valid {
            return Ok(None);
        }
        let r: Vec<f64> = traj.samples.iter().map(|s| boundary_state(&s.state, spec).r).collect();
        let mid = traj.samples[2].state;
        Ok(Some(DriftSample {
            f: f_of_x(mid.point.x),
            r: r[2],
            r_prime: (r[0] - 8.0 * r[1] + 8.0 * r[3] - r[4]) / (12.0 * cfg.spacing),
            r_prime_exact: drift_rate(&mid, spec),
        }))
    });

    let mut samples = Vec::with_capacity(total);
    let mut per_bin: Vec<Vec<DriftSample>> = vec![Vec::new(); cfg.bins];
    let mut failed = 0;
    for (i, res) in raw.into_iter().enumerate() {
        match res? {
            Some(s) => {
                per_bin[i / cfg.n_per_bin].push(s);
                samples.push(s);
            }
            None => failed += 1,
        }
    }

    let bins: Vec<DriftBin> = per_bin
        .iter()
        .enumerate()
        .map(|(b, items)| {
            let f_lo = cfg.f_min * ratio.powi(b as i32);
            let n = items.len();
            let abs: Vec<f64> = items.iter().map(|s| s.r_prime.abs()).collect();
            let mean = abs.iter().sum::<f64>() / n.max(1) as f64;
            let var = abs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
            DriftBin {
                f_lo,
                f_hi: f_lo * ratio,
                f: f_lo * ratio.sqrt(),
                n,
                mean_abs_r_prime: mean,
                stderr: (var / n.max(1) as f64).sqrt(),
                max_abs_r_prime: abs.iter().cloned().fold(0.0, f64::max),
            }
        })
        .collect();

    let max_abs_r_prime = samples.iter().map(|s| s.r_prime.abs()).fold(0.0, f64::max);
    let b_estimate = samples
        .iter()
        .map(|s| s.r_prime.abs() / s.f.powi(3))
        .fold(0.0, f64::max);
    let degenerate = max_abs_r_prime < DRIFT_FLOOR;

    let fit = if degenerate {
        None
    } else {
        let valid: Vec<&DriftBin> = bins
            .iter()
            .filter(|b| b.n >= MIN_BIN_COUNT && b.mean_abs_r_prime > 0.0)
            .collect();
        let span = match (valid.first(), valid.last()) {
            (Some(a), Some(b)) => (b.f / a.f).log10(),
            _ => 0.0,
        };
        if valid.len() < MIN_VALID_BINS || span < MIN_DRIFT_DECADES {
            return Err(Error::FitWindow(format!(
                "{} valid depth bins spanning {span:.2} decades; need {MIN_VALID_BINS} over {MIN_DRIFT_DECADES}",
                valid.len()
            )));
        }
        let pts: Vec<FitPoint> = valid
            .iter()
            .map(|b| FitPoint::new(b.f, b.mean_abs_r_prime, Some(b.stderr)))
            .collect();
        Some(power_law_fit(&pts)?)
    };

    Ok(DriftResult {
        bins,
        samples,
        fit,
        degenerate,
        max_abs_r_prime,
        b_estimate,
        failed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeConfig {
    pub eps_list: Vec<f64>,
    /// Trajectories per ε in each of the calibration and validation halves.
    pub n_per_half: usize,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        EscapeConfig {
            eps_list: vec![0.1, 0.05, 0.025, 0.0125],
            n_per_half: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub eps: f64,
    pub n: usize,
    pub min_t: f64,
    pub median_t: f64,
    /// Half-width-derived standard error of the median (order statistics).
    pub median_stderr: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
    /// Minimum over the calibration half only.
    pub calib_min_t: f64,
    pub capped: usize,
    pub lower_bounds: usize,
    /// Validation trajectories with `f > 2ε` before `1/(C₀ε)`.
    pub violations: usize,
    /// Escape time of the radial control vector started at `f = ε`.
    pub radial_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeResult {
    pub rows: Vec<EscapeRow>,
    /// Fit of the median escape time against ε.
    pub fit: FitResult,
    /// `max_ε 1/(ε · min T)` over the calibration half.
    pub c0_direct: f64,
    /// `1/τ*` from the drift bound with the calibrated `B`.
    pub c0_clairaut: f64,
    /// `max |r′|/f³` over the calibration states.
    pub b_calibrated: f64,
    /// Constant used for the validation window.
    pub c0: f64,
    pub total_violations: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Positive root `τ*` of `4Bτ² + τ − 1 = 0`: while `f ≤ 2ε`, `|f′| ≤ r` and
/// `r ≤ ε² + 8Bε³t` give `f(t) ≤ ε + ε²t + 4Bε³t²`, which stays below `2ε`
/// up to `t = τ*/ε`.
pub fn clairaut_window(b: f64) -> f64 {
    if b <= 0.0 {
        1.0
    } else {
        (-1.0 + (1.0 + 16.0 * b).sqrt()) / (8.0 * b)
    }
}

fn escape_options() -> IntegratorOptions {
    IntegratorOptions::default()
}

pub fn escape_experiment(cfg: &EscapeConfig, spec: &MetricSpec, seed: u64) -> Result<EscapeResult> {
    spec.validate()?;
    if cfg.eps_list.is_empty() || cfg.n_per_half == 0 {
        return Err(Error::Precondition(
            "escape experiment needs eps values and samples".into(),
        ));
    }
    for &eps in &cfg.eps_list {
        if !(eps > 0.0 && 2.0 * eps < f_of_x(spec.x_max) / 2.0) {
            return Err(Error::Precondition(format!("eps = {eps} needs 2 eps < f(x_max)/2")));
        }
    }
    let opts = escape_options();
    let n = cfg.n_per_half;

    struct Half {
        t: Vec<f64>,
        kind: Vec<EscapeKind>,
        b_max: f64,
    }
    let run = |k: usize, label: &str| -> Result<Half> {
        let eps = cfg.eps_list[k];
        let start = sample_v_eps(eps, n, spec, sub_seed(seed, label, k as u64))?;
        let out: Vec<Result<(f64, EscapeKind, f64)>> = par_indexed(n, |i| {
            let v = &start[i];
            let e = escape_time_with(v, eps, spec, &opts)?;
            let b = drift_rate(v, spec).abs() / f_of_x(v.point.x).powi(3);
            Ok((e.t, e.kind, b))
        });
        let mut half = Half {
            t: Vec::with_capacity(n),
            kind: Vec::with_capacity(n),
            b_max: 0.0,
        };
        for o in out {
            let (t, kind, b) = o?;
            half.t.push(t);
            half.kind.push(kind);
            half.b_max = half.b_max.max(b);
        }
        Ok(half)
    };

    let mut calib = Vec::new();
    let mut valid = Vec::new();
    for k in 0..cfg.eps_list.len() {
        calib.push(run(k, "escape/calibration")?);
        valid.push(run(k, "escape/validation")?);
    }

    let c0_direct = cfg
        .eps_list
        .iter()
        .zip(&calib)
        .map(|(eps, h)| 1.0 / (eps * h.t.iter().cloned().fold(f64::INFINITY, f64::min)))
        .fold(0.0, f64::max);
    let b_calibrated = calib.iter().map(|h| h.b_max).fold(0.0, f64::max);
    let c0_clairaut = 1.0 / clairaut_window(b_calibrated);
    let c0 = c0_direct.max(c0_clairaut);

    let mut rows = Vec::new();
    for (k, &eps) in cfg.eps_list.iter().enumerate() {
        let window = 1.0 / (c0 * eps);
        let violations = valid[k]
            .t
            .iter()
            .zip(&valid[k].kind)
            .filter(|(t, kind)| **kind == EscapeKind::Crossed && **t < window)
            .count();
        let mut all: Vec<f64> = calib[k].t.iter().chain(&valid[k].t).cloned().collect();
        let kinds: Vec<EscapeKind> = calib[k].kind.iter().chain(&valid[k].kind).cloned().collect();
        all.sort_by(f64::total_cmp);
        let m = all.len();
        // 95% order-statistic interval for the median
        let half_width = 1.96 * (m as f64).sqrt() / 2.0;
        let lo = ((m as f64 / 2.0 - half_width).floor().max(0.0)) as usize;
        let hi = ((m as f64 / 2.0 + half_width).ceil() as usize).min(m - 1);
        let radial = PhasePoint::new(
            ManifoldPoint::new(x_of_f(eps), 0.0, 0.0, 0.0, spec),
            TangentVector::new(0.5, 0.0, 0.0, 0.0),
        );
        rows.push(EscapeRow {
            eps,
            n: m,
            min_t: all[0],
            median_t: quantile(&all, 0.5),
            median_stderr: (all[hi] - all[lo]) / (2.0 * 1.96),
            q05: quantile(&all, 0.05),
            q25: quantile(&all, 0.25),
            q75: quantile(&all, 0.75),
            q95: quantile(&all, 0.95),
            calib_min_t: calib[k].t.iter().cloned().fold(f64::INFINITY, f64::min),
            capped: kinds.iter().filter(|k| **k == EscapeKind::Capped).count(),
            lower_bounds: kinds.iter().filter(|k| **k == EscapeKind::LowerBound).count(),
            violations,
            radial_t: escape_time_with(&radial, eps, spec, &opts)?.t,
        });
    }

    let pts: Vec<FitPoint> = rows
        .iter()
        .map(|r| FitPoint::new(r.eps, r.median_t, (r.median_stderr > 0.0).then_some(r.median_stderr)))
        .collect();
    let fit = power_law_fit(&pts)?;
    let total_violations = rows.iter().map(|r| r.violations).sum();
    Ok(EscapeResult {
        rows,
        fit,
        c0_direct,
        c0_clairaut,
        b_calibrated,
        c0,
        total_violations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub n: usize,
    /// Mean fitted constant in `∇_vλ ≈ c* ⟨v,Jλ⟩ ℓ^{-1/2} Jλ`.
    pub c_star: f64,
    /// Largest deviation of an individual `c*` from the mean.
    pub c_star_spread: f64,
    /// The constant in the general expansion, reported alongside.
    pub reference_constant: f64,
    /// Largest norm of the part of `∇_vλ` orthogonal to `Jλ`.
    pub max_orthogonal: f64,
    /// Slope of `‖∇_{e2}λ‖` against `1/f` across the sample footprints.
    pub inverse_f_slope: Option<FitResult>,
}

/// `∇_v λ` from the Christoffel symbols (`λ` has constant chart components).
pub fn covariant_derivative_lambda(p: &ManifoldPoint, v: &TangentVector, spec: &MetricSpec) -> Result<TangentVector> {
    let gamma = christoffel_at(p, spec)?;
    let lam = grad_sqrt_length(p, spec)?.as_array();
    let va = v.as_array();
    let mut out = [0.0; 4];
    for (k, o) in out.iter_mut().enumerate() {
        for i in 0..4 {
            for j in 0..4 {
                *o += gamma[k][i][j] * va[i] * lam[j];
            }
        }
    }
    Ok(TangentVector::from_array(out))
}

pub fn gradient_expansion_check(samples: &[PhasePoint], spec: &MetricSpec) -> Result<GradientReport> {
    if spec.eta != 0.0 {
        return Err(Error::Precondition("gradient expansion check needs eta = 0".into()));
    }
    let mut c_stars = Vec::new();
    let mut max_orthogonal: f64 = 0.0;
    let mut slope_pts = Vec::new();
    for v in samples {
        let p = &v.point;
        let lam = grad_sqrt_length(p, spec)?;
        let jl = apply_j(p, &lam, spec);
        let nab = covariant_derivative_lambda(p, &v.velocity, spec)?;
        let jj = inner(p, &jl, &jl, spec);
        let along = inner(p, &nab, &jl, spec) / jj;
        let orth = nab + -(jl.scale(along));
        max_orthogonal = max_orthogonal.max(norm(p, &orth, spec));
        let vj = inner(p, &v.velocity, &jl, spec);
        let f = f_of_x(p.x);
        if vj.abs() > 1e-12 * norm(p, &v.velocity, spec) * jj.sqrt() {
            c_stars.push(along * f / vj);
        }
        let e2 = TangentVector::new(0.0, 1.0 / p.x.powi(3), 0.0, 0.0);
        let n2 = norm(p, &covariant_derivative_lambda(p, &e2, spec)?, spec);
        slope_pts.push(FitPoint::new(1.0 / f, n2, None));
    }
    let mean = c_stars.iter().sum::<f64>() / c_stars.len().max(1) as f64;
    let spread = c_stars.iter().map(|c| (c - mean).abs()).fold(0.0, f64::max);
    let mut xs: Vec<f64> = slope_pts.iter().map(|p| p.param).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let inverse_f_slope = if xs.len() >= 4 {
        Some(power_law_fit(&slope_pts)?)
    } else {
        None
    };
    Ok(GradientReport {
        n: samples.len(),
        c_star: mean,
        c_star_spread: spread,
        reference_constant: 3.0 / (2.0 * std::f64::consts::PI),
        max_orthogonal,
        inverse_f_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_state_examples() {
        let spec = MetricSpec::default();
        let p = ManifoldPoint::new(0.1, 0.0, 0.0, 0.0, &spec);
        let torus = PhasePoint::new(p, TangentVector::new(0.0, 0.0, 1.0, 0.0));
        let b = boundary_state(&torus, &spec);
        assert_eq!(b.r, 0.0);
        assert!((b.f - 0.4442882938158366).abs() < 1e-15);
        let lam = grad_sqrt_length(&p, &spec).unwrap();
        let unit = PhasePoint::new(p, lam.scale(1.0 / LAMBDA_NORM));
        assert!((boundary_state(&unit, &spec).r - LAMBDA_NORM).abs() < 1e-14);
    }

    #[test]
    fn r_matches_the_inner_product_definition() {
        let spec = MetricSpec::with_eta(0.4);
        let p = ManifoldPoint::new(0.3, 0.1, 0.2, 0.6, &spec);
        let v = PhasePoint::from_frame(p, [0.3, -0.5, 0.2, 0.7], &spec);
        let lam = grad_sqrt_length(&p, &spec).unwrap();
        let jl = apply_j(&p, &lam, &spec);
        let direct = inner(&p, &v.velocity, &lam, &spec).hypot(inner(&p, &v.velocity, &jl, &spec));
        assert!((boundary_state(&v, &spec).r - direct).abs() < 1e-14);
    }

    #[test]
    fn clairaut_window_root() {
        assert_eq!(clairaut_window(0.0), 1.0);
        for b in [0.01, 0.25, 3.0] {
            let t = clairaut_window(b);
            assert!((4.0 * b * t * t + t - 1.0).abs() < 1e-14);
            assert!(t > 0.0 && t < 1.0);
        }
    }

    #[test]
    fn drift_rate_vanishes_without_coupling() {
        let spec = MetricSpec::default();
        let v = PhasePoint::from_frame(
            ManifoldPoint::new(0.2, 0.0, 0.0, 0.0, &spec),
            [0.3, 0.1, 0.9, 0.2],
            &spec,
        );
        assert_eq!(drift_rate(&v, &spec), 0.0);
    }

    #[test]
    fn covariant_derivative_examples() {
        let spec = MetricSpec::default();
        let p = ManifoldPoint::new(0.5, 0.0, 0.0, 0.0, &spec);
        let radial = covariant_derivative_lambda(&p, &TangentVector::new(1.0, 0.0, 0.0, 0.0), &spec).unwrap();
        assert_eq!(radial.as_array(), [0.0; 4]);
        // ∇_{∂τ}(a ∂x) = (3a/x) ∂τ
        let twist = covariant_derivative_lambda(&p, &TangentVector::new(0.0, 1.0, 0.0, 0.0), &spec).unwrap();
        let a = crate::geometry::SQRT_TWO_PI_SQ / 4.0;
        assert!((twist.vtau - 3.0 * a / 0.5).abs() < 1e-12);
        assert_eq!([twist.vx, twist.vy1, twist.vy2], [0.0; 3]);
    }
}
