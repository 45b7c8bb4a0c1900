use wpflow::boundary::boundary_state;
use wpflow::geometry::{to_frame, x_of_f, ManifoldPoint, MetricSpec};
use wpflow::measure::{
    estimate_volume, liouville_sample, minkowski_codimension, minkowski_codimension_with, volume_scaling, BaseDensity,
    RegionFamily, RegionSpec,
};

const RHO: [f64; 6] = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125];
const EPS: [f64; 6] = [0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625];

/// Kolmogorov–Smirnov statistic against a continuous CDF.
fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn footprints_follow_the_liouville_density() {
    let spec = MetricSpec::default();
    let rho = 0.3;
    let n = 100_000;
    let pts = liouville_sample(&RegionSpec::ERho { rho }, n, &spec, 1).unwrap();
    let x_hi = x_of_f(rho);
    let lo4 = spec.x_floor.powi(4);
    let d = ks_statistic(pts.iter().map(|v| v.point.x).collect(), |x| {
        (x.powi(4) - lo4) / (x_hi.powi(4) - lo4)
    });
    // p > 0.01 ⇔ √n D < 1.628
    assert!((n as f64).sqrt() * d < 1.628, "KS statistic {d}");
}

#[test]
fn fiber_directions_are_isotropic() {
    let spec = MetricSpec::with_eta(0.5);
    let n = 100_000;
    let pts = liouville_sample(&RegionSpec::Tube { x_lo: 0.2, x_hi: 0.9 }, n, &spec, 2).unwrap();
    let ws: Vec<[f64; 4]> = pts.iter().map(|v| to_frame(&v.point, &v.velocity, &spec)).collect();
    for i in 0..4 {
        let mean = ws.iter().map(|w| w[i]).sum::<f64>() / n as f64;
        // component variance is 1/4, so the mean has stderr 1/(2√n)
        assert!(mean.abs() < 3.0 * 0.5 / (n as f64).sqrt(), "mean {i} = {mean}");
        for j in 0..4 {
            let cov = ws.iter().map(|w| w[i] * w[j]).sum::<f64>() / n as f64;
            let target = if i == j { 0.25 } else { 0.0 };
            // Var(w_i²) = 1/6 − 1/16 on S³; Var(w_i w_j) = 1/24
            let sd = if i == j {
                (1.0f64 / 6.0 - 1.0 / 16.0).sqrt()
            } else {
                (1.0f64 / 24.0).sqrt()
            };
            assert!(
                (cov - target).abs() < 3.0 * sd / (n as f64).sqrt(),
                "cov {i}{j} = {cov}"
            );
        }
    }
}

#[test]
fn liouville_sample_is_deterministic_across_pools() {
    let spec = MetricSpec::with_eta(0.3);
    let region = RegionSpec::VEps { eps: 0.05 };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let a = one.install(|| liouville_sample(&region, 10_000, &spec, 9).unwrap());
    let b = three.install(|| liouville_sample(&region, 10_000, &spec, 9).unwrap());
    assert_eq!(a, b);
}

#[test]
fn e_rho_estimates_match_the_closed_form() {
    for eta in [0.0, 0.5] {
        let spec = MetricSpec::with_eta(eta);
        for rho in RHO {
            let est = estimate_volume(
                &RegionSpec::ERho { rho },
                rho,
                100_000,
                &spec,
                3,
                BaseDensity::Liouville,
            )
            .unwrap();
            let exact = (x_of_f(rho).powi(4) - spec.x_floor.powi(4)) / spec.x_max.powi(4);
            assert!(
                (est.volume - exact).abs() < 3.0 * est.stderr,
                "eta {eta}, rho {rho}: {} vs {exact} ± {}",
                est.volume,
                est.stderr
            );
        }
    }
}

#[test]
fn v_eps_estimates_match_the_closed_form() {
    let spec = MetricSpec::default();
    for eps in EPS {
        let est = estimate_volume(
            &RegionSpec::VEps { eps },
            eps,
            100_000,
            &spec,
            4,
            BaseDensity::Liouville,
        )
        .unwrap();
        // base fraction times the fiber fraction 2ε⁴/π²
        let exact = x_of_f(eps).powi(4) * 2.0 * eps.powi(4) / std::f64::consts::PI.powi(2);
        assert!((est.volume - exact).abs() < 3.0 * est.stderr, "eps {eps}");
    }
}

#[test]
fn volume_exponents() {
    let spec = MetricSpec::default();
    let e = volume_scaling(RegionFamily::ERho, &RHO, 100_000, &spec, 5).unwrap();
    assert!((e.fit.exponent - 4.0).abs() <= 0.1, "{:?}", e.fit);
    let v = volume_scaling(RegionFamily::VEps, &EPS, 100_000, &spec, 6).unwrap();
    assert!((v.fit.exponent - 8.0).abs() <= 0.2, "{:?}", v.fit);
    let b = volume_scaling(RegionFamily::FixedBall, &RHO, 100_000, &spec, 7).unwrap();
    assert!(b.fit.exponent.abs() <= 0.05, "{:?}", b.fit);
    for p in e.points.iter().chain(&v.points) {
        assert!(p.rel_stderr() <= 0.05);
    }
}

#[test]
fn exponent_is_invariant_under_rescaling_the_parameter() {
    let spec = MetricSpec::default();
    let a = volume_scaling(RegionFamily::ERho, &RHO, 50_000, &spec, 8).unwrap();
    let scaled: Vec<f64> = RHO.iter().map(|r| 1.5 * r).collect();
    let b = volume_scaling(RegionFamily::ERho, &scaled, 50_000, &spec, 8).unwrap();
    assert!(b.fit.exponent >= a.fit.ci_low - 0.05 && b.fit.exponent <= a.fit.ci_high + 0.05);
    // ln vol shifts by 4 ln 1.5 at a fixed parameter
    let shift = b.fit.predict(1.5 * 0.1).ln() - a.fit.predict(0.1).ln();
    assert!((shift - 4.0 * 1.5f64.ln()).abs() < 0.1);
}

#[test]
fn sweep_needs_decades() {
    let spec = MetricSpec::default();
    assert!(volume_scaling(RegionFamily::ERho, &[0.4, 0.2, 0.1, 0.05], 1000, &spec, 1).is_err());
    assert!(minkowski_codimension(&[0.1], 1000, &spec, 1).is_err());
}

#[test]
fn codimension_four_and_its_control() {
    let spec = MetricSpec::default();
    let c = minkowski_codimension(&EPS, 100_000, &spec, 9).unwrap();
    assert!((c.codimension - 4.0).abs() <= 0.1);
    assert!(c.exceeds_two);
    let control = minkowski_codimension_with(&EPS, 100_000, &spec, 9, BaseDensity::Power(1.0)).unwrap();
    assert!((control.codimension - 2.0).abs() <= 0.1, "{}", control.codimension);
    assert!(!control.exceeds_two);
}

#[test]
fn ball_region_contains_its_centre_only_nearby() {
    let spec = MetricSpec::default();
    let center = ManifoldPoint::new(0.7, 0.95, 0.02, 0.5, &spec);
    let region = RegionSpec::Ball { center, radius: 0.15 };
    let pts = liouville_sample(&region, 2000, &spec, 3).unwrap();
    for v in &pts {
        assert!(region.contains(v, &spec));
        assert!((v.point.x - 0.7).abs() <= 0.075 + 1e-12);
        let _ = boundary_state(v, &spec);
    }
}
