//! Online estimator: couples the quantum filter, its parameter
//! sensitivities, and a stochastic gradient-ascent update into one
//! recursion driven by the measurement record.
//!
//! Each record sample dy_k advances, in this order and all evaluated at the
//! current estimate θ̃_k,
//!
//! ```text
//! ρ̃_{k+1}   = K_dy(ρ̃_k) / Tr K_dy(ρ̃_k)
//! ξ_{j,k+1}  = sensitivity recursion (see the filter module)
//! θ̃_{j,k+1} = clamp( θ̃_{j,k} + γ_k · g_j )
//! ```
//!
//! where g_j is the normalized per-step gradient increment and γ_k the
//! learning rate at time t_k = k·dt. Estimates live in working coordinates
//! (e.g. √η, √κ), so box constraints are enforced by simple projection.

use crate::algebra::{maximally_mixed, DensityOperator, TangentOperator};
use crate::error::{Error, Result};
use crate::filter::{advance, FilterState, StepScalars};
use crate::model::{DiffusiveModel, KrausContext};
use crate::sim::step_error;

/// Learning-rate schedule γ_t.
#[derive(Clone, Debug, PartialEq)]
pub enum LearningRate {
    /// γ_t = γ₀.
    Constant(f64),
    /// Piecewise-constant segments (t_start, γ), ascending in t_start with
    /// the first at t = 0; γ_t is the last segment with t_start ≤ t.
    Piecewise(Vec<(f64, f64)>),
    /// γ_t = γ₀·(1 + t/t₀)^(−α).
    PowerDecay { gamma0: f64, t0: f64, alpha: f64 },
}

impl LearningRate {
    /// Checks finiteness, non-negativity and segment ordering. A zero rate
    /// is allowed (it freezes the estimate, which is occasionally useful
    /// for filter-only runs).
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("learning rate: {what}")));
        match self {
            LearningRate::Constant(g) => {
                if !g.is_finite() || *g < 0.0 {
                    return bad("γ₀ must be finite and ≥ 0");
                }
            }
            LearningRate::Piecewise(segments) => {
                if segments.is_empty() {
                    return bad("piecewise schedule needs at least one segment");
                }
                if segments[0].0 != 0.0 {
                    return bad("first piecewise segment must start at t = 0");
                }
                let mut prev = f64::NEG_INFINITY;
                for &(start, g) in segments {
                    if !start.is_finite() || start <= prev {
                        return bad("segment starts must be finite and strictly ascending");
                    }
                    if !g.is_finite() || g < 0.0 {
                        return bad("segment rates must be finite and ≥ 0");
                    }
                    prev = start;
                }
            }
            LearningRate::PowerDecay { gamma0, t0, alpha } => {
                if !gamma0.is_finite() || *gamma0 < 0.0 {
                    return bad("γ₀ must be finite and ≥ 0");
                }
                if !t0.is_finite() || *t0 <= 0.0 {
                    return bad("t₀ must be finite and positive");
                }
                if !alpha.is_finite() || *alpha < 0.0 {
                    return bad("decay exponent must be finite and ≥ 0");
                }
            }
        }
        Ok(())
    }
}

/// Evaluates the schedule at time t ≥ 0.
pub fn learning_rate_at(lr: &LearningRate, t: f64) -> f64 {
    match lr {
        LearningRate::Constant(g) => *g,
        LearningRate::Piecewise(segments) => {
            let mut g = segments[0].1;
            for &(start, value) in segments {
                if start <= t {
                    g = value;
                } else {
                    break;
                }
            }
            g
        }
        LearningRate::PowerDecay { gamma0, t0, alpha } => gamma0 * (1.0 + t / t0).powf(-*alpha),
    }
}

/// Estimator state: filter state plus the current estimate in working
/// coordinates and its learning-rate schedule. The step count lives in
/// `fs.step`.
#[derive(Clone, Debug)]
pub struct EstimatorState {
    pub fs: FilterState,
    /// Current estimate, working coordinates.
    pub theta: Vec<f64>,
    pub lr: LearningRate,
}

impl EstimatorState {
    pub fn new<M: DiffusiveModel + ?Sized>(
        model: &M,
        theta0_working: &[f64],
        lr: LearningRate,
        rho0: DensityOperator,
    ) -> Result<Self> {
        model.params().validate_working(theta0_working)?;
        lr.validate()?;
        if rho0.dim() != model.dim() {
            return Err(Error::DimensionMismatch(rho0.dim(), model.dim()));
        }
        Ok(EstimatorState {
            fs: FilterState::new(rho0, model.params().len()),
            theta: theta0_working.to_vec(),
            lr,
        })
    }

    /// Current estimate in natural coordinates.
    pub fn theta_natural<M: DiffusiveModel + ?Sized>(&self, model: &M) -> Vec<f64> {
        model.params().to_natural(&self.theta)
    }
}

/// Advances an estimator state in place by one record sample: filter and
/// sensitivity updates followed by the gradient-ascent parameter update
/// with projection onto the working-coordinate bounds.
pub fn step_in_place<M: DiffusiveModel + ?Sized>(
    model: &M,
    es: &mut EstimatorState,
    dy: f64,
    strict_positivity: bool,
) -> Result<StepScalars> {
    let t = es.fs.step as f64 * model.dt();
    let gamma = learning_rate_at(&es.lr, t);
    let ctx =
        KrausContext::new(model, &es.theta).map_err(|e| step_error(e, es.fs.step))?;
    let scalars = advance(&ctx, &mut es.fs, dy, strict_positivity)?;
    for (th, g) in es.theta.iter_mut().zip(scalars.grad.iter()) {
        *th += gamma * *g;
    }
    model.params().clamp_working(&mut es.theta);
    Ok(scalars)
}

/// One estimator update; all three sub-updates (state, sensitivities,
/// estimate) consume the same dy and evaluate the map at the incoming θ̃.
pub fn estimator_step<M: DiffusiveModel + ?Sized>(
    model: &M,
    es: &EstimatorState,
    dy: f64,
) -> Result<EstimatorState> {
    let mut next = es.clone();
    step_in_place(model, &mut next, dy, false)?;
    Ok(next)
}

/// Recovery policy when a filter update degenerates (vanishing map trace).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegeneratePolicy {
    /// Stop the run and report the error in the log (default).
    Abort,
    /// Reset ρ̃ to the maximally mixed state and the sensitivities to zero,
    /// then retry the sample once; abort if it degenerates again.
    RestartMixed,
}

/// Options for [`run_online`].
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Error out when the updated state's smallest eigenvalue drops below
    /// the strict tolerance, instead of the default scrub-and-continue.
    pub strict_positivity: bool,
    pub degenerate_policy: DegeneratePolicy,
    /// Log every `decimation`-th step (≥ 1).
    pub decimation: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            strict_positivity: false,
            degenerate_policy: DegeneratePolicy::Abort,
            decimation: 100,
        }
    }
}

/// One logged step of an online run; all quantities are post-update.
#[derive(Clone, Debug)]
pub struct EstimateRow {
    /// 1-based count of completed steps.
    pub step: usize,
    pub t: f64,
    /// Rescaled time ∫₀ᵗ γ ds (= γ·t exactly for a constant rate).
    pub gamma_t: f64,
    pub dy: f64,
    pub innovation: f64,
    /// Accumulated log-likelihood.
    pub loglik: f64,
    /// Estimate, working coordinates.
    pub theta_working: Vec<f64>,
    /// Estimate, natural coordinates.
    pub theta_natural: Vec<f64>,
    /// Bloch vector of ρ̃ (two-level systems only).
    pub bloch: Option<[f64; 3]>,
}

/// Result of an online run: decimated rows, the final state, and — when a
/// step failed — the error, with all rows up to the failure preserved.
#[derive(Clone, Debug)]
pub struct EstimateLog {
    pub dt: f64,
    pub decimation: usize,
    pub param_names: Vec<String>,
    pub rows: Vec<EstimateRow>,
    /// Steps successfully consumed.
    pub steps: usize,
    pub final_state: EstimatorState,
    /// Error that terminated the run early, if any.
    pub failure: Option<Error>,
    /// Degenerate-update restarts performed (RestartMixed policy).
    pub restarts: usize,
}

/// Folds the estimator over a measurement record, logging every
/// `options.decimation`-th step. Deterministic given its inputs. Usage
/// errors (empty record, bad arguments) are returned as `Err`; numerical
/// step failures terminate the run early and are reported in
/// [`EstimateLog::failure`] with the partial log intact.
pub fn run_online<M, I>(
    model: &M,
    dys: I,
    theta0_working: &[f64],
    lr: LearningRate,
    rho0: DensityOperator,
    options: &RunOptions,
) -> Result<EstimateLog>
where
    M: DiffusiveModel + ?Sized,
    I: IntoIterator<Item = f64>,
{
    if options.decimation == 0 {
        return Err(Error::InvalidArgument("decimation must be positive".into()));
    }
    let mut es = EstimatorState::new(model, theta0_working, lr, rho0)?;
    let dt = model.dt();
    let dim = model.dim();
    let spec = model.params();
    let mut rows = Vec::new();
    let mut gamma_time = 0.0_f64;
    let mut failure = None;
    let mut restarts = 0_usize;
    let mut saw_any = false;

    for dy in dys {
        saw_any = true;
        let t_pre = es.fs.step as f64 * dt;
        let outcome = match step_in_place(model, &mut es, dy, options.strict_positivity) {
            Err(Error::DegenerateUpdate { .. })
                if options.degenerate_policy == DegeneratePolicy::RestartMixed =>
            {
                restarts += 1;
                es.fs.rho = maximally_mixed(dim);
                for xi in es.fs.xi.iter_mut() {
                    *xi = TangentOperator::zero(dim);
                }
                step_in_place(model, &mut es, dy, options.strict_positivity)
            }
            other => other,
        };
        let scalars = match outcome {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if let LearningRate::Constant(g) = &es.lr {
            gamma_time = *g * (es.fs.step as f64 * dt);
        } else {
            gamma_time += learning_rate_at(&es.lr, t_pre) * dt;
        }
        if es.fs.step % options.decimation == 0 {
            rows.push(EstimateRow {
                step: es.fs.step,
                t: es.fs.step as f64 * dt,
                gamma_t: gamma_time,
                dy,
                innovation: scalars.innovation,
                loglik: es.fs.loglik,
                theta_working: es.theta.clone(),
                theta_natural: spec.to_natural(&es.theta),
                bloch: (dim == 2).then(|| es.fs.rho.bloch()),
            });
        }
    }
    if !saw_any {
        return Err(Error::InvalidArgument("empty measurement record".into()));
    }

    Ok(EstimateLog {
        dt,
        decimation: options.decimation,
        param_names: spec.names().iter().map(|s| s.to_string()).collect(),
        rows,
        steps: es.fs.step,
        final_state: es,
        failure,
        restarts,
    })
}
