//! End-to-end behaviour of the online estimator: stream/batch simulator
//! agreement, convergence from an offset start, freeze at zero learning
//! rate, decimation soundness, and noise amplification with the rate.

mod support;

use qmle::algebra::{ket_projector, maximally_mixed};
use qmle::estimator::{run_online, LearningRate, RunOptions};
use qmle::model::DiffusiveModel;
use qmle::sim::{simulate, Sinusoid, TruthSchedule};
use support::*;

#[test]
fn sim_stream_matches_batch_simulator() {
    let dt = 1e-2;
    let steps = 1_000;
    let (model, _) = model_at(TRUTH, dt);

    let static_sched = TruthSchedule::constant(TRUTH.to_vec());
    let rho0 = ket_projector(2, 0).unwrap();
    let batch = simulate(&model, &static_sched, steps, 77, &rho0, steps).unwrap();
    let streamed: Vec<f64> =
        SimStream::new(&model, &static_sched, 77, rho0.clone(), 1)
            .take(steps)
            .collect();
    assert_eq!(batch.dy, streamed, "static schedule must replay bit-exactly");

    let drifting = TruthSchedule::with_sinusoids(
        TRUTH.to_vec(),
        vec![
            Some(Sinusoid {
                amplitude: 0.5,
                frequency: 0.12,
            }),
            None,
            Some(Sinusoid {
                amplitude: 0.2,
                frequency: 0.05,
            }),
            None,
        ],
        1e-4,
    )
    .unwrap();
    let batch = simulate(&model, &drifting, steps, 78, &rho0, steps).unwrap();
    let streamed: Vec<f64> = SimStream::new(&model, &drifting, 78, rho0.clone(), 1)
        .take(steps)
        .collect();
    assert_eq!(batch.dy, streamed, "drifting schedule must replay bit-exactly");
}

/// Mean of the per-parameter natural estimates over the final tenth of a run.
fn tail_means(log: &qmle::estimator::EstimateLog, steps: usize) -> Vec<f64> {
    let cut = steps - steps / 10;
    let tail: Vec<&qmle::estimator::EstimateRow> =
        log.rows.iter().filter(|r| r.step > cut).collect();
    assert!(tail.len() > 10);
    let p = tail[0].theta_natural.len();
    (0..p)
        .map(|j| tail.iter().map(|r| r.theta_natural[j]).sum::<f64>() / tail.len() as f64)
        .collect()
}

#[test]
fn online_estimator_converges_from_offset_start() {
    let dt = 1e-2;
    let steps = 2_000_000;
    let gamma = 5e-4;
    let (model, w0) = model_at(OFFSET_START, dt);
    let schedule = TruthSchedule::constant(TRUTH.to_vec());
    let options = RunOptions::default();

    let mut per_seed: Vec<Vec<f64>> = Vec::new();
    for seed in [1, 2, 3] {
        let stream = SimStream::new(&model, &schedule, seed, ket_projector(2, 0).unwrap(), 1)
            .take(steps);
        let log = run_online(
            &model,
            stream,
            &w0,
            LearningRate::Constant(gamma),
            maximally_mixed(2),
            &options,
        )
        .unwrap();
        assert!(log.failure.is_none(), "seed {seed}: {:?}", log.failure);
        assert_eq!(log.steps, steps);
        per_seed.push(tail_means(&log, steps));
    }

    let names = model.params().names();
    let mut medians = vec![0.0; 4];
    for j in 0..4 {
        let vals: Vec<f64> = per_seed.iter().map(|t| t[j]).collect();
        medians[j] = median(&vals);
        eprintln!(
            "  {}: tail means {:?} -> median {:.4} (truth {})",
            names[j], vals, medians[j], TRUTH[j]
        );
    }

    // Frequencies converge fast; the noise-scale parameters are slower and
    // noisier, so they get looser boxes.
    assert!((medians[0] - TRUTH[0]).abs() <= 0.10 * TRUTH[0].abs(), "omega");
    assert!((medians[1] - TRUTH[1]).abs() <= 0.20 * TRUTH[1].abs(), "delta");
    assert!((medians[2] - TRUTH[2]).abs() <= 0.25 * TRUTH[2].abs(), "eta");
    assert!((medians[3] - TRUTH[3]).abs() <= 0.30 * TRUTH[3].abs(), "kappa");

    // The working-coordinate error must have contracted substantially.
    let (_, w_truth) = model_at(TRUTH, dt);
    let err0: f64 = w0
        .iter()
        .zip(&w_truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let w_med = model.params().to_working(&medians).unwrap();
    let err: f64 = w_med
        .iter()
        .zip(&w_truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    eprintln!("  working-coordinate error: {err0:.4} -> {err:.4}");
    assert!(err <= 0.25 * err0, "error failed to contract: {err0} -> {err}");
}

#[test]
fn zero_rate_freezes_estimate_while_filtering() {
    let dt = 1e-2;
    let steps = 10_000;
    let dys = record_at(TRUTH, dt, steps, 91);
    let (model, w0) = model_at(OFFSET_START, dt);
    let log = run_online(
        &model,
        dys,
        &w0,
        LearningRate::Constant(0.0),
        maximally_mixed(2),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(log.failure.is_none());
    for row in &log.rows {
        assert_eq!(row.theta_working, w0, "estimate moved at step {}", row.step);
    }
    // The filter itself keeps accumulating information.
    assert!(log.rows.last().unwrap().loglik != 0.0);
}

#[test]
fn decimation_is_sound() {
    let dt = 1e-2;
    let steps = 5_000;
    let dys = record_at(TRUTH, dt, steps, 92);
    let (model, w0) = model_at(OFFSET_START, dt);
    let lr = LearningRate::Constant(1e-3);

    let full = run_online(
        &model,
        dys.clone(),
        &w0,
        lr.clone(),
        maximally_mixed(2),
        &RunOptions {
            decimation: 1,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let thin = run_online(
        &model,
        dys,
        &w0,
        lr,
        maximally_mixed(2),
        &RunOptions {
            decimation: 100,
            ..RunOptions::default()
        },
    )
    .unwrap();

    assert_eq!(full.rows.len(), steps);
    assert_eq!(thin.rows.len(), steps / 100);
    for row in &thin.rows {
        let twin = &full.rows[row.step - 1];
        assert_eq!(row.step, twin.step);
        assert_eq!(row.t.to_bits(), twin.t.to_bits());
        assert_eq!(row.dy.to_bits(), twin.dy.to_bits());
        assert_eq!(row.loglik.to_bits(), twin.loglik.to_bits());
        assert_eq!(row.theta_working, twin.theta_working);
        assert_eq!(row.theta_natural, twin.theta_natural);
    }
}

/// A larger learning rate amplifies measurement noise: the stationary
/// fluctuation of Ω̃ grows with γ.
#[test]
fn noise_amplification_with_larger_rate() {
    let dt = 1e-2;
    let steps = 600_000;
    let (model, w_truth) = model_at(TRUTH, dt);
    let schedule = TruthSchedule::constant(TRUTH.to_vec());

    let tail_std_omega = |gamma: f64, seed: u64| -> f64 {
        let stream = SimStream::new(&model, &schedule, seed, ket_projector(2, 0).unwrap(), 1)
            .take(steps);
        let log = run_online(
            &model,
            stream,
            &w_truth,
            LearningRate::Constant(gamma),
            maximally_mixed(2),
            &RunOptions::default(),
        )
        .unwrap();
        assert!(log.failure.is_none());
        let omegas: Vec<f64> = log
            .rows
            .iter()
            .filter(|r| r.step > steps / 2)
            .map(|r| r.theta_natural[0])
            .collect();
        std_dev(&omegas)
    };

    let seeds = [5, 6, 7, 8];
    let slow: Vec<f64> = seeds.iter().map(|&s| tail_std_omega(5e-4, s)).collect();
    let fast: Vec<f64> = seeds.iter().map(|&s| tail_std_omega(1e-3, s)).collect();
    let (m_slow, m_fast) = (median(&slow), median(&fast));
    eprintln!("  tail std of omega: gamma=5e-4 -> {m_slow:.5}, gamma=1e-3 -> {m_fast:.5}");
    assert!(
        m_fast > m_slow,
        "larger rate did not amplify noise: {m_fast:.5} <= {m_slow:.5}"
    );
}
