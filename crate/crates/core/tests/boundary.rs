use wpflow::boundary::{
    boundary_state, drift_experiment, drift_rate, escape_experiment, gradient_expansion_check, sample_v_eps,
    DriftConfig, EscapeConfig,
};
use wpflow::flow::{integrate, IntegratorOptions, Output, PhasePoint};
use wpflow::geometry::{f_of_x, ManifoldPoint, MetricSpec, TangentVector};
use wpflow::measure::uniform_s3;
use wpflow::seed::stream;

#[test]
fn v_eps_samples_satisfy_the_definition_and_symmetry() {
    let spec = MetricSpec::with_eta(0.3);
    for eps in [0.2, 0.05, 0.01] {
        let vs = sample_v_eps(eps, 5000, &spec, 1).unwrap();
        assert_eq!(vs.len(), 5000);
        for v in &vs {
            let b = boundary_state(v, &spec);
            assert!(b.f <= eps && b.r <= eps * eps);
            assert!((v.speed(&spec) - 1.0).abs() < 1e-12);
            assert_eq!(boundary_state(&v.reversed(), &spec), b);
        }
    }
}

#[test]
fn fiber_fraction_matches_brute_force_sphere_sampling() {
    // Fraction of the unit sphere at a fixed footprint with r ≤ ε².
    let spec = MetricSpec::default();
    let p = ManifoldPoint::new(0.01, 0.0, 0.0, 0.0, &spec);
    let mut rng = stream(3, "sphere", 0);
    let n = 400_000;
    let eps = 0.9;
    let hits = (0..n)
        .filter(|_| {
            let v = PhasePoint::from_frame(p, uniform_s3(&mut rng), &spec);
            boundary_state(&v, &spec).r <= eps * eps
        })
        .count();
    let frac = hits as f64 / n as f64;
    let expect = 2.0 * eps.powi(4) / std::f64::consts::PI.powi(2);
    let se = (expect * (1.0 - expect) / n as f64).sqrt();
    assert!((frac - expect).abs() < 4.0 * se, "{frac} vs {expect}");
}

#[test]
fn product_model_conserves_r_and_bounds_f_prime() {
    let spec = MetricSpec::default();
    for i in 0..50 {
        let mut rng = stream(4, "conserve", i);
        let p = ManifoldPoint::new(0.2 + 0.6 * (i as f64 / 50.0), 0.3, 0.1, 0.9, &spec);
        let v0 = PhasePoint::from_frame(p, uniform_s3(&mut rng), &spec);
        let opts = IntegratorOptions {
            output: Output::Uniform(0.05),
            ..IntegratorOptions::default()
        };
        let traj = integrate(&v0, 5.0, &spec, &opts).unwrap();
        let r0 = boundary_state(&v0, &spec).r;
        for s in &traj.samples {
            let b = boundary_state(&s.state, &spec);
            if traj.events.iter().all(|e| e.t > s.t) {
                assert!((b.r - r0).abs() < 1e-10);
            }
            // f′ = √(2π²) vx
            let f_prime = wpflow::geometry::SQRT_TWO_PI_SQ * s.state.velocity.vx;
            assert!(f_prime.abs() <= b.r + 1e-8);
        }
    }
}

#[test]
fn drift_rate_formula_matches_finite_differences() {
    let spec = MetricSpec::with_eta(0.3);
    let cfg = DriftConfig {
        n_per_bin: 20,
        ..DriftConfig::default()
    };
    let res = drift_experiment(&cfg, &spec, 5).unwrap();
    for s in &res.samples {
        let scale = s.r_prime_exact.abs().max(1e-3 * s.f.powi(3));
        assert!((s.r_prime - s.r_prime_exact).abs() < 1e-4 * scale, "{s:?}");
    }
}

#[test]
fn drift_exponent_is_three() {
    for eta in [0.1, 0.3, 0.5] {
        let spec = MetricSpec::with_eta(eta);
        let res = drift_experiment(&DriftConfig::default(), &spec, 6).unwrap();
        let fit = res.fit.expect("non-degenerate");
        println!(
            "eta = {eta}: exponent {:.4} [{:.4}, {:.4}], B = {:.4e}",
            fit.exponent, fit.ci_low, fit.ci_high, res.b_estimate
        );
        assert!((fit.exponent - 3.0).abs() <= 0.3);
        assert!(!res.degenerate);
    }
}

#[test]
fn drift_vanishes_in_the_product_model() {
    let spec = MetricSpec::default();
    let res = drift_experiment(&DriftConfig::default(), &spec, 7).unwrap();
    assert!(res.degenerate);
    assert!(res.fit.is_none());
    assert!(res.max_abs_r_prime < 1e-10, "{:e}", res.max_abs_r_prime);
}

#[test]
fn drift_bound_holds_along_trajectories() {
    // |r(t) − r(0)| ≤ B (2ε)³ t while f ≤ 2ε
    let spec = MetricSpec::with_eta(0.3);
    let b = drift_experiment(&DriftConfig::default(), &spec, 8).unwrap().b_estimate;
    let eps = 0.05;
    for (i, v0) in sample_v_eps(eps, 100, &spec, 9).unwrap().iter().enumerate() {
        let opts = IntegratorOptions {
            output: Output::Uniform(0.5),
            stop_at_f: Some(2.0 * eps),
            ..IntegratorOptions::default()
        };
        let traj = integrate(v0, 10.0 / eps, &spec, &opts).unwrap();
        let r0 = boundary_state(v0, &spec).r;
        for s in &traj.samples {
            let r = boundary_state(&s.state, &spec).r;
            assert!(
                (r - r0).abs() <= b * (2.0 * eps).powi(3) * s.t * 1.01 + 1e-12,
                "trajectory {i}"
            );
        }
    }
}

#[test]
fn drift_rejects_bad_windows() {
    let spec = MetricSpec::with_eta(0.3);
    let narrow = DriftConfig {
        f_min: 0.1,
        f_max: 0.5,
        n_per_bin: 20,
        ..DriftConfig::default()
    };
    assert!(matches!(
        drift_experiment(&narrow, &spec, 1),
        Err(wpflow::Error::FitWindow(_))
    ));
}

#[test]
fn escape_scaling_and_held_out_window() {
    let spec = MetricSpec::with_eta(0.3);
    let cfg = EscapeConfig {
        eps_list: vec![0.1, 0.05, 0.025, 0.0125],
        n_per_half: 100,
    };
    let res = escape_experiment(&cfg, &spec, 10).unwrap();
    for r in &res.rows {
        println!(
            "eps {:.4}: min eps*T {:.4}, median eps*T {:.4}, radial {:.3e}",
            r.eps,
            r.eps * r.min_t,
            r.eps * r.median_t,
            r.radial_t
        );
        assert!((r.radial_t - 2.0 * r.eps / wpflow::geometry::SQRT_TWO_PI_SQ).abs() < 1e-9);
    }
    println!(
        "slope {:.4}, c0 {:.4} (direct {:.4}, clairaut {:.4})",
        res.fit.exponent, res.c0, res.c0_direct, res.c0_clairaut
    );
    assert!((res.fit.exponent + 1.0).abs() <= 0.15);
    assert_eq!(res.total_violations, 0);
}

#[test]
fn gradient_expansion_structure() {
    let spec = MetricSpec::default();
    let mut rng = stream(11, "gradient", 0);
    let samples: Vec<PhasePoint> = (0..200)
        .map(|i| {
            let x = 0.05 + 0.85 * i as f64 / 199.0;
            PhasePoint::from_frame(ManifoldPoint::new(x, 0.1, 0.2, 0.3, &spec), uniform_s3(&mut rng), &spec)
        })
        .collect();
    let rep = gradient_expansion_check(&samples, &spec).unwrap();
    assert!((rep.c_star - 3.0).abs() < 1e-10);
    assert!(rep.c_star_spread < 1e-8);
    assert!(rep.max_orthogonal < 1e-12);
    let slope = rep.inverse_f_slope.unwrap();
    assert!((slope.exponent - 1.0).abs() < 1e-6);

    // radial direction: ∇λ vanishes
    let radial = PhasePoint::new(
        ManifoldPoint::new(0.5, 0.0, 0.0, 0.0, &spec),
        TangentVector::new(0.5, 0.0, 0.0, 0.0),
    );
    let rep = gradient_expansion_check(&[radial], &spec).unwrap();
    assert_eq!(rep.max_orthogonal, 0.0);
    assert!(gradient_expansion_check(&samples, &MetricSpec::with_eta(0.3)).is_err());
    let _ = (f_of_x(0.5), drift_rate(&radial, &spec));
}
