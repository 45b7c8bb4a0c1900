//! The model manifold: a Weil-Petersson cusp plane crossed with a flat torus.
//!
//! Chart coordinates are `(x, tau, y1, y2)`. The metric is
//!
//! ```text
//!     g = 4 dx² + x⁶ dτ² + h(x, y1) (dy1² + dy2²),
//!     h = 1 + η x⁴ cos(2π y1 / L1)
//! ```
//!
//! where `x = ℓ^{1/2} / √(2π²)` is the pinching coordinate of the shrinking
//! curve, `τ` its twist and `(y1, y2)` stand in for the length coordinates of
//! the boundary stratum. With `η = 0` this is an exact Riemannian product and
//! the cusp-plane speed is conserved along geodesics. The `η` coupling is the
//! smallest perturbation that breaks that conservation at order `x³` in the
//! connection.
//!
//! Index convention everywhere: `0 = x`, `1 = τ`, `2 = y1`, `3 = y2`.
//! Christoffel arrays are indexed `gamma[k][i][j] = Γ^k_{ij}`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix4 = [[f64; 4]; 4];
pub type Christoffel = [[[f64; 4]; 4]; 4];
pub type Riemann = [[[[f64; 4]; 4]; 4]; 4];

/// `√(2π²)`: converts the chart coordinate `x` to `f = ℓ^{1/2}`.
pub const SQRT_TWO_PI_SQ: f64 = PI * std::f64::consts::SQRT_2;

/// `‖λ‖_g = π/√2`, the norm of `grad ℓ^{1/2}`; constant on the whole chart.
pub const LAMBDA_NORM: f64 = PI / std::f64::consts::SQRT_2;

pub fn f_of_x(x: f64) -> f64 {
    SQRT_TWO_PI_SQ * x
}

pub fn x_of_f(f: f64) -> f64 {
    f / SQRT_TWO_PI_SQ
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSpec {
    /// Reflecting outer wall of the cusp coordinate.
    pub x_max: f64,
    /// Integration aborts below this depth.
    pub x_floor: f64,
    pub tau_period: f64,
    pub torus_sides: [f64; 2],
    /// Coupling strength, `0 <= eta < 1`.
    pub eta: f64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            x_max: 1.0,
            x_floor: 1e-6,
            tau_period: 1.0,
            torus_sides: [1.0, 1.0],
            eta: 0.0,
        }
    }
}

impl MetricSpec {
    pub fn with_eta(eta: f64) -> Self {
        MetricSpec { eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.x_max,
            self.x_floor,
            self.tau_period,
            self.torus_sides[0],
            self.torus_sides[1],
            self.eta,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidSpec("non-finite field".into()));
        }
        if !(self.x_floor > 0.0 && self.x_floor < self.x_max) {
            return Err(Error::InvalidSpec(format!(
                "need 0 < x_floor < x_max, got x_floor = {}, x_max = {}",
                self.x_floor, self.x_max
            )));
        }
        if self.tau_period <= 0.0 || self.torus_sides.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidSpec("periods must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidSpec(format!("eta must lie in [0, 1), got {}", self.eta)));
        }
        // h >= 1 - eta * x_max^4 must stay positive
        if self.eta * self.x_max.powi(4) >= 1.0 {
            return Err(Error::InvalidSpec(
                "eta * x_max^4 >= 1 makes the compact block degenerate".into(),
            ));
        }
        Ok(())
    }

    /// Serializes to a `key = value` block.
    pub fn to_config_string(&self) -> String {
        toml::to_string(self).expect("metric spec is always representable")
    }

    pub fn from_config_str(s: &str) -> Result<Self> {
        let spec: MetricSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn torus_area(&self) -> f64 {
        self.torus_sides[0] * self.torus_sides[1]
    }

    /// Total Liouville base mass `∫ √det g` over the chart. The `η` term
    /// integrates to zero over a full `y1` period.
    pub fn base_mass(&self) -> f64 {
        0.5 * self.x_max.powi(4) * self.tau_period * self.torus_area()
    }

    pub fn check_domain(&self, x: f64) -> Result<()> {
        if x >= self.x_floor && x <= self.x_max {
            Ok(())
        } else {
            Err(Error::Domain {
                x,
                lo: self.x_floor,
                hi: self.x_max,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub x: f64,
    pub tau: f64,
    pub y1: f64,
    pub y2: f64,
}

impl ManifoldPoint {
    /// Builds a point with periodic coordinates reduced to the fundamental domain.
    pub fn new(x: f64, tau: f64, y1: f64, y2: f64, spec: &MetricSpec) -> Self {
        ManifoldPoint { x, tau, y1, y2 }.reduced(spec)
    }

    pub fn reduced(self, spec: &MetricSpec) -> Self {
        ManifoldPoint {
            x: self.x,
            tau: self.tau.rem_euclid(spec.tau_period),
            y1: self.y1.rem_euclid(spec.torus_sides[0]),
            y2: self.y2.rem_euclid(spec.torus_sides[1]),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.tau, self.y1, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        ManifoldPoint {
            x: a[0],
            tau: a[1],
            y1: a[2],
            y2: a[3],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub vx: f64,
    pub vtau: f64,
    pub vy1: f64,
    pub vy2: f64,
}

impl TangentVector {
    pub fn new(vx: f64, vtau: f64, vy1: f64, vy2: f64) -> Self {
        TangentVector { vx, vtau, vy1, vy2 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.vx, self.vtau, self.vy1, self.vy2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        TangentVector::new(a[0], a[1], a[2], a[3])
    }

    pub fn scale(&self, s: f64) -> Self {
        TangentVector::new(self.vx * s, self.vtau * s, self.vy1 * s, self.vy2 * s)
    }
}

impl std::ops::Neg for TangentVector {
    type Output = TangentVector;
    fn neg(self) -> TangentVector {
        self.scale(-1.0)
    }
}

impl std::ops::Add for TangentVector {
    type Output = TangentVector;
    fn add(self, o: TangentVector) -> TangentVector {
        TangentVector::new(self.vx + o.vx, self.vtau + o.vtau, self.vy1 + o.vy1, self.vy2 + o.vy2)
    }
}

/// The conformal factor `h` of the torus block and its partial derivatives.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TorusFactor {
    pub h: f64,
    pub h_x: f64,
    pub h_y: f64,
    pub h_xx: f64,
    pub h_xy: f64,
    pub h_yy: f64,
}

impl TorusFactor {
    #[inline]
    pub fn at(x: f64, y1: f64, spec: &MetricSpec) -> Self {
        if spec.eta == 0.0 {
            return TorusFactor {
                h: 1.0,
                h_x: 0.0,
                h_y: 0.0,
                h_xx: 0.0,
                h_xy: 0.0,
                h_yy: 0.0,
            };
        }
        let k = 2.0 * PI / spec.torus_sides[0];
        let (s, c) = (k * y1).sin_cos();
        let x2 = x * x;
        let x3 = x2 * x;
        let x4 = x2 * x2;
        let eta = spec.eta;
        TorusFactor {
            h: 1.0 + eta * x4 * c,
            h_x: 4.0 * eta * x3 * c,
            h_y: -eta * x4 * k * s,
            h_xx: 12.0 * eta * x2 * c,
            h_xy: -4.0 * eta * x3 * k * s,
            h_yy: -eta * x4 * k * k * c,
        }
    }
}

/// Diagonal of the metric at `p` (the metric is diagonal in this chart).
#[inline]
pub(crate) fn metric_diagonal(x: f64, y1: f64, spec: &MetricSpec) -> [f64; 4] {
    let h = TorusFactor::at(x, y1, spec).h;
    [4.0, x.powi(6), h, h]
}

pub fn metric_at(p: &ManifoldPoint, spec: &MetricSpec) -> Result<Matrix4> {
    spec.check_domain(p.x)?;
    let d = metric_diagonal(p.x, p.y1, spec);
    let mut g = [[0.0; 4]; 4];
    for i in 0..4 {
        g[i][i] = d[i];
    }
    Ok(g)
}

pub fn inverse_metric_at(p: &ManifoldPoint, spec: &MetricSpec) -> Result<Matrix4> {
    spec.check_domain(p.x)?;
    let d = metric_diagonal(p.x, p.y1, spec);
    let mut g = [[0.0; 4]; 4];
    for i in 0..4 {
        g[i][i] = 1.0 / d[i];
    }
    Ok(g)
}

/// `√det g = 2 x³ h`, the Riemannian volume density of the chart.
pub fn volume_density(p: &ManifoldPoint, spec: &MetricSpec) -> f64 {
    let h = TorusFactor::at(p.x, p.y1, spec).h;
    2.0 * p.x.powi(3) * h
}

pub fn inner(p: &ManifoldPoint, u: &TangentVector, v: &TangentVector, spec: &MetricSpec) -> f64 {
    let d = metric_diagonal(p.x, p.y1, spec);
    d[0] * u.vx * v.vx + d[1] * u.vtau * v.vtau + d[2] * u.vy1 * v.vy1 + d[3] * u.vy2 * v.vy2
}

pub fn norm(p: &ManifoldPoint, v: &TangentVector, spec: &MetricSpec) -> f64 {
    inner(p, v, v, spec).sqrt()
}

/// Christoffel symbols in closed form.
pub fn christoffel_at(p: &ManifoldPoint, spec: &MetricSpec) -> Result<Christoffel> {
    spec.check_domain(p.x)?;
    Ok(christoffel_unchecked(p.x, p.y1, spec))
}

pub(crate) fn christoffel_unchecked(x: f64, y1: f64, spec: &MetricSpec) -> Christoffel {
    let t = TorusFactor::at(x, y1, spec);
    let mut g = [[[0.0; 4]; 4]; 4];

    g[0][1][1] = -0.75 * x.powi(5);
    g[1][0][1] = 3.0 / x;
    g[1][1][0] = 3.0 / x;

    g[0][2][2] = -t.h_x / 8.0;
    g[0][3][3] = -t.h_x / 8.0;

    let ax = t.h_x / (2.0 * t.h);
    g[2][0][2] = ax;
    g[2][2][0] = ax;
    g[3][0][3] = ax;
    g[3][3][0] = ax;

    let ay = t.h_y / (2.0 * t.h);
    g[2][2][2] = ay;
    g[2][3][3] = -ay;
    g[3][2][3] = ay;
    g[3][3][2] = ay;
    g
}

/// Partial derivatives `dgamma[m][k][i][j] = ∂_m Γ^k_{ij}`, in closed form.
pub(crate) fn christoffel_derivatives(x: f64, y1: f64, spec: &MetricSpec) -> [Christoffel; 4] {
    let t = TorusFactor::at(x, y1, spec);
    let mut d = [[[[0.0; 4]; 4]; 4]; 4];

    d[0][0][1][1] = -3.75 * x.powi(4);
    d[0][1][0][1] = -3.0 / (x * x);
    d[0][1][1][0] = -3.0 / (x * x);

    d[0][0][2][2] = -t.h_xx / 8.0;
    d[0][0][3][3] = -t.h_xx / 8.0;
    d[2][0][2][2] = -t.h_xy / 8.0;
    d[2][0][3][3] = -t.h_xy / 8.0;

    let h2 = 2.0 * t.h * t.h;
    // ∂(h_x / 2h) and ∂(h_y / 2h)
    let ax_x = (t.h_xx * t.h - t.h_x * t.h_x) / h2;
    let ax_y = (t.h_xy * t.h - t.h_x * t.h_y) / h2;
    let ay_x = (t.h_xy * t.h - t.h_y * t.h_x) / h2;
    let ay_y = (t.h_yy * t.h - t.h_y * t.h_y) / h2;

    for (m, ax_m, ay_m) in [(0usize, ax_x, ay_x), (2usize, ax_y, ay_y)] {
        d[m][2][0][2] = ax_m;
        d[m][2][2][0] = ax_m;
        d[m][3][0][3] = ax_m;
        d[m][3][3][0] = ax_m;

        d[m][2][2][2] = ay_m;
        d[m][2][3][3] = -ay_m;
        d[m][3][2][3] = ay_m;
        d[m][3][3][2] = ay_m;
    }
    d
}

/// Fully covariant Riemann tensor `R_{abcd}` with the convention
/// `R^a_{bcd} = ∂_c Γ^a_{db} − ∂_d Γ^a_{cb} + Γ^a_{ce} Γ^e_{db} − Γ^a_{de} Γ^e_{cb}`,
/// so that `K(u, v) = R_{abcd} u^a v^b u^c v^d / (|u|²|v|² − ⟨u,v⟩²)`.
pub fn riemann_at(p: &ManifoldPoint, spec: &MetricSpec) -> Result<Riemann> {
    spec.check_domain(p.x)?;
    let gam = christoffel_unchecked(p.x, p.y1, spec);
    let dgam = christoffel_derivatives(p.x, p.y1, spec);
    let diag = metric_diagonal(p.x, p.y1, spec);

    let mut r = [[[[0.0; 4]; 4]; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let mut v = dgam[c][a][d][b] - dgam[d][a][c][b];
                    for e in 0..4 {
                        v += gam[a][c][e] * gam[e][d][b] - gam[a][d][e] * gam[e][c][b];
                    }
                    // lower the first index; metric is diagonal
                    r[a][b][c][d] = diag[a] * v;
                }
            }
        }
    }
    Ok(r)
}

const DEGENERATE_PLANE_TOL: f64 = 1e-12;

pub fn sectional_curvature(
    p: &ManifoldPoint,
    plane: (&TangentVector, &TangentVector),
    spec: &MetricSpec,
) -> Result<f64> {
    let (u, v) = plane;
    let uu = inner(p, u, u, spec);
    let vv = inner(p, v, v, spec);
    let uv = inner(p, u, v, spec);
    let area2 = uu * vv - uv * uv;
    if !(area2 > DEGENERATE_PLANE_TOL * uu * vv) {
        return Err(Error::DegeneratePlane);
    }
    let r = riemann_at(p, spec)?;
    let (ua, va) = (u.as_array(), v.as_array());
    let mut num = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    num += r[a][b][c][d] * ua[a] * va[b] * ua[c] * va[d];
                }
            }
        }
    }
    Ok(num / area2)
}

/// `λ = grad ℓ^{1/2}`. Since `g_xx = 4` for every `η`, `λ = (√(2π²)/4) ∂x`.
pub fn grad_sqrt_length(p: &ManifoldPoint, spec: &MetricSpec) -> Result<TangentVector> {
    spec.check_domain(p.x)?;
    Ok(TangentVector::new(SQRT_TWO_PI_SQ / 4.0, 0.0, 0.0, 0.0))
}

/// Components of `v` in the orthonormal frame
/// `(∂x/2, ∂τ/x³, ∂y1/√h, ∂y2/√h)`.
pub fn to_frame(p: &ManifoldPoint, v: &TangentVector, spec: &MetricSpec) -> [f64; 4] {
    let d = metric_diagonal(p.x, p.y1, spec);
    [
        2.0 * v.vx,
        p.x.powi(3) * v.vtau,
        d[2].sqrt() * v.vy1,
        d[3].sqrt() * v.vy2,
    ]
}

pub fn from_frame(p: &ManifoldPoint, w: [f64; 4], spec: &MetricSpec) -> TangentVector {
    let d = metric_diagonal(p.x, p.y1, spec);
    let sh = d[2].sqrt();
    TangentVector::new(0.5 * w[0], w[1] / p.x.powi(3), w[2] / sh, w[3] / sh)
}

/// The complex structure: a quarter turn of the orthonormal frame in the
/// cusp plane (`e1 → e2 → −e1`) and in the torus plane.
pub fn apply_j(p: &ManifoldPoint, v: &TangentVector, spec: &MetricSpec) -> TangentVector {
    let w = to_frame(p, v, spec);
    from_frame(p, [-w[1], w[0], -w[3], w[2]], spec)
}

/// Geodesic acceleration `−Γ^k_{ij} v^i v^j`, specialised to the diagonal chart.
#[inline]
pub(crate) fn geodesic_acceleration(pos: &[f64; 4], vel: &[f64; 4], spec: &MetricSpec) -> [f64; 4] {
    let x = pos[0];
    let [vx, vt, v1, v2] = *vel;
    let t = TorusFactor::at(x, pos[2], spec);
    let ax = t.h_x / (2.0 * t.h);
    let ay = t.h_y / (2.0 * t.h);
    [
        0.75 * x.powi(5) * vt * vt + t.h_x / 8.0 * (v1 * v1 + v2 * v2),
        -6.0 / x * vx * vt,
        -2.0 * ax * vx * v1 - ay * (v1 * v1 - v2 * v2),
        -2.0 * ax * vx * v2 - 2.0 * ay * v1 * v2,
    ]
}
