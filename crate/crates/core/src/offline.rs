//! Offline (batch) maximum-likelihood machinery over a fixed measurement
//! record: exact total log-likelihood, exact recursive gradient at fixed
//! parameters, full-record gradient ascent, and finite-difference oracles.
//!
//! Every parameter evaluation re-propagates the filter from ρ̃₀ over the
//! whole record — nothing is cached across parameter points, which keeps
//! the gradient/likelihood correspondence trivially auditable and the
//! record strictly read-only.

use crate::algebra::DensityOperator;
use crate::error::{Error, Result};
use crate::estimator::{learning_rate_at, LearningRate};
use crate::filter::{advance, propagate, FilterState};
use crate::model::{DiffusiveModel, KrausContext};
use crate::sim::step_error;

/// Total log-likelihood ℓ_T(θ) of a record at fixed working parameters,
/// propagating the filter from ρ̃₀ and summing the normalized per-step
/// increments ln[Tr K_dy(ρ̃)/Z].
pub fn loglik_total<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    dys: &[f64],
    rho0: &DensityOperator,
) -> Result<f64> {
    check_record(dys)?;
    let ctx = KrausContext::new(model, w)?;
    let mut rho = rho0.clone();
    let mut total = 0.0;
    for (k, &dy) in dys.iter().enumerate() {
        let (next, dll) = propagate(&ctx, &rho, dy).map_err(|e| step_error(e, k))?;
        rho = next;
        total += dll;
    }
    Ok(total)
}

/// Exact gradient ∇_w ℓ_T(θ): propagates (ρ̃, ξ) at fixed parameters over
/// the record, summing the recursive per-step gradient increments.
pub fn grad_total<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    dys: &[f64],
    rho0: &DensityOperator,
) -> Result<Vec<f64>> {
    check_record(dys)?;
    let ctx = KrausContext::new(model, w)?;
    let p = ctx.n_params();
    let mut fs = FilterState::new(rho0.clone(), p);
    let mut grad = vec![0.0; p];
    for &dy in dys {
        let scalars = advance(&ctx, &mut fs, dy, false)?;
        for (g, inc) in grad.iter_mut().zip(scalars.grad.iter()) {
            *g += inc;
        }
    }
    Ok(grad)
}

/// Central difference (f(x + ε·e_j) − f(x − ε·e_j)) / 2ε.
pub fn central_difference<F>(mut f: F, x: &[f64], j: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if j >= x.len() {
        return Err(Error::InvalidArgument(format!(
            "coordinate index {j} out of range for {} coordinates",
            x.len()
        )));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step ε = {eps} must be positive"
        )));
    }
    let mut plus = x.to_vec();
    plus[j] += eps;
    let mut minus = x.to_vec();
    minus[j] -= eps;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * eps))
}

/// Central finite differences of [`loglik_total`] per working parameter, on
/// the same record. Errors if a displaced point w ± ε·e_j leaves the bounds.
pub fn finite_diff_grad<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    dys: &[f64],
    rho0: &DensityOperator,
    eps: f64,
) -> Result<Vec<f64>> {
    check_record(dys)?;
    model.params().validate_working(w)?;
    (0..w.len())
        .map(|j| central_difference(|x| loglik_total(model, x, dys, rho0), w, j, eps))
        .collect()
}

/// Controls for [`offline_ascent`].
#[derive(Clone, Debug)]
pub struct AscentOptions {
    /// Step-size schedule over the iteration index (evaluated at t = i).
    pub schedule: LearningRate,
    pub max_iters: usize,
    /// Stop once ‖∇ℓ‖∞ ≤ tol. `None` uses the adaptive default
    /// 1e−3·(1 + |ℓ_T|/T) for a T-step record.
    pub tol: Option<f64>,
    /// Halve the step whenever a proposal decreases ℓ (monotone ascent);
    /// disabled, the plain fixed-schedule rule is used.
    pub backtracking: bool,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            schedule: LearningRate::Constant(1e-3),
            max_iters: 100,
            tol: None,
            backtracking: true,
        }
    }
}

/// Iteration history of a batch gradient ascent.
#[derive(Clone, Debug)]
pub struct BatchResult {
    /// θ per iteration (working coordinates); entry 0 is θ₀.
    pub theta_trace: Vec<Vec<f64>>,
    /// ℓ_T per iteration.
    pub loglik_trace: Vec<f64>,
    /// ‖∇ℓ‖∞ per iteration.
    pub grad_norm_trace: Vec<f64>,
    pub converged: bool,
    /// Accepted iterations performed (0 when already stationary at θ₀).
    pub iterations: usize,
}

impl BatchResult {
    /// Final estimate, working coordinates.
    pub fn theta(&self) -> &[f64] {
        self.theta_trace.last().expect("trace is never empty")
    }
}

/// Batch gradient ascent θ_{i+1} = clamp(θ_i + γ_i·∇ℓ_T(θ_i)) over a fixed
/// record, stopping when the gradient ∞-norm falls below tolerance or the
/// iteration budget is exhausted.
pub fn offline_ascent<M: DiffusiveModel + ?Sized>(
    model: &M,
    theta0_working: &[f64],
    dys: &[f64],
    rho0: &DensityOperator,
    options: &AscentOptions,
) -> Result<BatchResult> {
    check_record(dys)?;
    options.schedule.validate()?;
    let spec = model.params();
    spec.validate_working(theta0_working)?;
    let record_len = dys.len() as f64;
    let tol_at = |ll: f64| {
        options
            .tol
            .unwrap_or_else(|| 1e-3 * (1.0 + ll.abs() / record_len))
    };

    let mut theta = theta0_working.to_vec();
    let mut ll = loglik_total(model, &theta, dys, rho0)?;
    let mut grad = grad_total(model, &theta, dys, rho0)?;
    ensure_finite(ll, &grad)?;

    let mut theta_trace = vec![theta.clone()];
    let mut loglik_trace = vec![ll];
    let mut grad_norm_trace = vec![inf_norm(&grad)];
    let mut converged = inf_norm(&grad) <= tol_at(ll);
    let mut iterations = 0;
    // Persistent backtracking shrink factor applied on top of the schedule.
    let mut shrink = 1.0_f64;

    while !converged && iterations < options.max_iters {
        let gamma_base = learning_rate_at(&options.schedule, iterations as f64);
        let mut halvings = 0;
        let (cand, cand_ll) = loop {
            let gamma = shrink * gamma_base;
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(grad.iter())
                .map(|(t, g)| t + gamma * g)
                .collect();
            spec.clamp_working(&mut cand);
            let cand_ll = loglik_total(model, &cand, dys, rho0)?;
            if !cand_ll.is_finite() {
                return Err(Error::NonFinite(
                    "total log-likelihood during ascent".into(),
                ));
            }
            // After ~60 halvings the proposal coincides with θ bitwise and
            // ℓ cannot decrease further, so the loop always terminates.
            if options.backtracking && cand_ll < ll && halvings < 60 {
                shrink *= 0.5;
                halvings += 1;
                continue;
            }
            break (cand, cand_ll);
        };
        theta = cand;
        ll = cand_ll;
        grad = grad_total(model, &theta, dys, rho0)?;
        ensure_finite(ll, &grad)?;
        iterations += 1;
        theta_trace.push(theta.clone());
        loglik_trace.push(ll);
        grad_norm_trace.push(inf_norm(&grad));
        converged = inf_norm(&grad) <= tol_at(ll);
    }

    Ok(BatchResult {
        theta_trace,
        loglik_trace,
        grad_norm_trace,
        converged,
        iterations,
    })
}

fn check_record(dys: &[f64]) -> Result<()> {
    if dys.is_empty() {
        return Err(Error::InvalidArgument("empty measurement record".into()));
    }
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

fn ensure_finite(ll: f64, grad: &[f64]) -> Result<()> {
    if !ll.is_finite() {
        return Err(Error::NonFinite("total log-likelihood".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log-likelihood gradient".into()));
    }
    Ok(())
}
