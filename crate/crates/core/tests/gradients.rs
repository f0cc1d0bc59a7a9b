//! Gradient correctness against finite-difference oracles that replay the
//! raw-matrix reference filter on the same measurement record.

mod support;

use qmle::algebra::maximally_mixed;
use qmle::filter::{advance, FilterState};
use qmle::model::{DiffusiveModel, KrausContext};
use qmle::offline::{finite_diff_grad, grad_total};
use support::*;

/// After 2·10⁴ coupled steps, each sensitivity operator ξ_j equals the
/// central finite difference of the replayed filter state in working
/// coordinate j, entrywise to 1e-4 relative to the sensitivity's magnitude.
#[test]
fn sensitivity_matches_filter_replay() {
    let dt = 1e-2;
    let steps = 20_000;
    let eps = 1e-5;
    let dys = record_at(TRUTH, dt, steps, 21);

    // Propagate the coupled filter at mismatched parameters.
    let (model, w) = model_at(OFFSET_START, dt);
    let ctx = KrausContext::new(&model, &w).unwrap();
    let mut fs = FilterState::new(maximally_mixed(2), 4);
    for &dy in &dys {
        advance(&ctx, &mut fs, dy, false).unwrap();
    }

    let rho0 = rho_from_bloch(0.0, 0.0, 0.0);
    for j in 0..4 {
        let mut wp = w.clone();
        wp[j] += eps;
        let mut wm = w.clone();
        wm[j] -= eps;
        let rp = raw_from_working(&wp, dt).replay_state(&rho0, &dys);
        let rm = raw_from_working(&wm, dt).replay_state(&rho0, &dys);
        let fd = mat_scale(c(0.5 / eps, 0.0), &mat_sub(&rp, &rm));

        let got = mat_from_op(fs.xi[j].op());
        let scale = mat_max_abs(&fd);
        assert!(scale > 1e-3, "parameter {j}: degenerate sensitivity scale");
        let rel = mat_max_abs_diff(&got, &fd) / scale;
        assert!(
            rel <= 1e-4,
            "parameter {j}: sensitivity vs replayed finite difference, \
             relative deviation {rel:.3e} (scale {scale:.3e})"
        );
    }
}

/// The recursive total gradient matches central finite differences of the
/// reference implementation's total log-likelihood.
#[test]
fn grad_total_matches_raw_finite_differences() {
    let dt = 1e-2;
    let steps = 3_000;
    let eps = 1e-5;
    let rho0_mat = rho_from_bloch(0.0, 0.0, 0.0);
    for seed in [11, 12] {
        let dys = record_at(TRUTH, dt, steps, seed);
        let (model, w) = model_at(TRUTH, dt);
        let got = grad_total(&model, &w, &dys, &maximally_mixed(2)).unwrap();

        for j in 0..4 {
            let mut wp = w.clone();
            wp[j] += eps;
            let mut wm = w.clone();
            wm[j] -= eps;
            let lp = raw_from_working(&wp, dt).loglik_total(&rho0_mat, &dys);
            let lm = raw_from_working(&wm, dt).loglik_total(&rho0_mat, &dys);
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (got[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(
                rel <= 1e-4,
                "seed {seed}, parameter {j}: recursive {got:?} vs reference \
                 finite difference {fd} (relative {rel:.3e})",
                got = got[j]
            );
        }
    }
}

/// Finite-difference gradients are robust to the step size: ε ∈
/// {1e-4, 1e-5, 1e-6} give mutually consistent results, all matching the
/// recursive gradient.
#[test]
fn epsilon_sweep_is_consistent() {
    let dt = 1e-2;
    let dys = record_at(TRUTH, dt, 2_000, 31);
    let (model, w) = model_at(OFFSET_START, dt);
    let rho0 = maximally_mixed(2);

    let exact = grad_total(&model, &w, &dys, &rho0).unwrap();
    let sweeps: Vec<Vec<f64>> = [1e-4, 1e-5, 1e-6]
        .iter()
        .map(|&eps| finite_diff_grad(&model, &w, &dys, &rho0, eps).unwrap())
        .collect();

    for j in 0..model.params().len() {
        for s in &sweeps {
            let rel = (s[j] - exact[j]).abs() / exact[j].abs().max(1e-8);
            assert!(
                rel <= 1e-4,
                "parameter {j}: finite difference {} vs recursive {} (rel {rel:.3e})",
                s[j],
                exact[j]
            );
        }
        for pair in sweeps.windows(2) {
            let rel = (pair[0][j] - pair[1][j]).abs() / pair[1][j].abs().max(1e-8);
            assert!(
                rel <= 1e-4,
                "parameter {j}: step-size sweep disagrees (rel {rel:.3e})"
            );
        }
    }
}
