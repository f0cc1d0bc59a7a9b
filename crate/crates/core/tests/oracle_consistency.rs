//! Self-checks of the reference implementations in `support`, and agreement
//! between the library's one-step map/filter and the straight-line raw-matrix
//! re-implementation.

mod support;

use qmle::algebra::maximally_mixed;
use qmle::filter::{advance, propagate, FilterState};
use qmle::model::{DiffusiveModel, KrausContext};
use support::*;

#[test]
fn hermite_nodes_reproduce_known_moments() {
    let sqrt_pi = std::f64::consts::PI.sqrt();
    for &n in &[2, 7, 20, 64] {
        let (x, w) = gauss_hermite(n);
        let m0: f64 = w.iter().sum();
        assert!(
            (m0 - sqrt_pi).abs() <= 1e-13,
            "zeroth moment off at n={n}: {m0}"
        );
        let m1: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi).sum();
        assert!(m1.abs() <= 1e-13, "first moment off at n={n}: {m1}");
        if n >= 2 {
            let m2: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi).sum();
            assert!((m2 - sqrt_pi / 2.0).abs() <= 1e-13, "n={n}: {m2}");
        }
        if n >= 3 {
            let m4: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(4)).sum();
            assert!((m4 - 0.75 * sqrt_pi).abs() <= 1e-12, "n={n}: {m4}");
        }
        if n >= 4 {
            let m6: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(6)).sum();
            assert!((m6 - 1.875 * sqrt_pi).abs() <= 1e-12, "n={n}: {m6}");
        }
    }
}

#[test]
fn gaussian_expectation_matches_closed_forms() {
    // E[y⁴] under N(m, v) = m⁴ + 6m²v + 3v².
    let (m, v) = (0.3, 0.04);
    let got = gaussian_expect(|y| y.powi(4), m, v, 64);
    let want = m.powi(4) + 6.0 * m * m * v + 3.0 * v * v;
    assert!((got - want).abs() <= 1e-14, "quartic: {got} vs {want}");

    // E[cos y] under N(0, v) = exp(−v/2); entire function, converges fast.
    let got = gaussian_expect(f64::cos, 0.0, 0.25, 64);
    let want = (-0.125_f64).exp();
    assert!((got - want).abs() <= 1e-13, "cosine: {got} vs {want}");

    // Degenerate variance: the expectation collapses to f(mean).
    let got = gaussian_expect(|y| y * y + 1.0, 2.0, 0.0, 8);
    assert!((got - 5.0).abs() <= 1e-14);
}

#[test]
fn kraus_operator_matches_raw_construction() {
    let mut u = UniformStream::new(101);
    for _ in 0..25 {
        let theta = [
            u.in_range(-1.5, 1.5),
            u.in_range(-1.5, 1.5),
            u.in_range(0.0, 1.0),
            u.in_range(0.02, 1.0),
        ];
        let dt = u.in_range(1e-4, 2e-2);
        let dy = u.in_range(-0.5, 0.5);
        let (model, w) = model_at(theta, dt);
        let ctx = KrausContext::new(&model, &w).unwrap();
        let raw = raw_two_level(theta[0], theta[1], theta[2], theta[3], dt);
        let diff = mat_max_abs_diff(&mat_from_op(&ctx.m_at(dy)), &raw.m(dy));
        assert!(diff <= 1e-14, "M_dy mismatch: {diff:.3e}");
    }
}

#[test]
fn map_trace_polynomial_matches_raw_trace() {
    let mut u = UniformStream::new(202);
    for _ in 0..25 {
        let theta = [
            u.in_range(-1.5, 1.5),
            u.in_range(-1.5, 1.5),
            u.in_range(0.0, 1.0),
            u.in_range(0.02, 1.0),
        ];
        let dt = u.in_range(1e-4, 2e-2);
        let (model, w) = model_at(theta, dt);
        let ctx = KrausContext::new(&model, &w).unwrap();
        let raw = raw_two_level(theta[0], theta[1], theta[2], theta[3], dt);
        let b = u.bloch(0.95);
        let rho = rho_from_bloch(b[0], b[1], b[2]);
        let quad = ctx.trace_coeffs(&op_from_mat(&rho));

        // The quadratic outcome polynomial evaluates to the raw map trace.
        for _ in 0..4 {
            let dy = u.in_range(-0.6, 0.6);
            let got = quad.eval(dy);
            let want = raw.trace_kraus(&rho, dy);
            assert!(
                (got - want).abs() <= 1e-13 * want.abs().max(1.0),
                "trace at dy={dy}: {got} vs {want}"
            );
        }

        // Its closed-form Gaussian mean equals the quadrature of the raw trace.
        let got = quad.gaussian_mean(dt);
        let want = raw.z_quadrature(&rho);
        assert!(
            (got - want).abs() <= 1e-13,
            "outcome-averaged trace: {got} vs {want}"
        );
    }
}

#[test]
fn single_filter_step_matches_raw_oracle() {
    // Pinned point: ρ̃ = I/2, dy = 0.05, dt = 1e-2 at the standard example
    // parameters.
    let dt = 1e-2;
    let (model, w) = model_at(TRUTH, dt);
    let ctx = KrausContext::new(&model, &w).unwrap();
    let raw = raw_two_level(TRUTH[0], TRUTH[1], TRUTH[2], TRUTH[3], dt);

    let rho_mat = rho_from_bloch(0.0, 0.0, 0.0);
    let (want_rho, want_dll) = raw.filter_step(&rho_mat, 0.05);
    let (got_rho, got_dll) = propagate(&ctx, &maximally_mixed(2), 0.05).unwrap();
    assert!(mat_max_abs_diff(&mat_from_op(got_rho.op()), &want_rho) <= 1e-14);
    assert!((got_dll - want_dll).abs() <= 1e-14);

    // The coupled step must agree bitwise with the state-only fast path,
    // and both with the oracle, across random states and outcomes.
    let mut u = UniformStream::new(303);
    for _ in 0..20 {
        let b = u.bloch(0.9);
        let dy = u.in_range(-0.4, 0.4);
        let rho = density_from_bloch(b);
        let mut fs = FilterState::new(rho.clone(), model.params().len());
        let scalars = advance(&ctx, &mut fs, dy, true).unwrap();
        let (fast_rho, fast_dll) = propagate(&ctx, &rho, dy).unwrap();
        assert_eq!(fs.rho.op().entries(), fast_rho.op().entries());
        assert_eq!(scalars.dloglik, fast_dll);

        let (want_rho, want_dll) = raw.filter_step(&rho_from_bloch(b[0], b[1], b[2]), dy);
        assert!(
            mat_max_abs_diff(&mat_from_op(fs.rho.op()), &want_rho) <= 1e-13,
            "state mismatch"
        );
        assert!((scalars.dloglik - want_dll).abs() <= 1e-13, "Δℓ mismatch");
    }
}

#[test]
fn accumulated_loglik_matches_raw_oracle() {
    let dt = 1e-2;
    let dys = record_at(TRUTH, dt, 300, 7);
    // Evaluate at deliberately mismatched parameters so increments are
    // nontrivial.
    let eval = OFFSET_START;
    let (model, w) = model_at(eval, dt);
    let rho0 = maximally_mixed(2);

    let got = qmle::offline::loglik_total(&model, &w, &dys, &rho0).unwrap();
    let raw = raw_two_level(eval[0], eval[1], eval[2], eval[3], dt);
    let want = raw.loglik_total(&rho_from_bloch(0.0, 0.0, 0.0), &dys);
    assert!(
        (got - want).abs() <= 1e-10 * want.abs().max(1.0),
        "total log-likelihood: {got} vs {want}"
    );

    // Final state agreement after the full record.
    let mut rho = rho0;
    for &dy in &dys {
        let ctx = KrausContext::new(&model, &w).unwrap();
        rho = propagate(&ctx, &rho, dy).unwrap().0;
    }
    let want_rho = raw.replay_state(&rho_from_bloch(0.0, 0.0, 0.0), &dys);
    assert!(mat_max_abs_diff(&mat_from_op(rho.op()), &want_rho) <= 1e-11);
}
