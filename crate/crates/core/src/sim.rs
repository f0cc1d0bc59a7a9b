//! Seeded trajectory simulation: propagates the true state with the same
//! one-step Kraus map used by the filter and emits the diffusive measurement
//! record dy = √η·Tr((L+L†)ρ)·dt + dW, dW ~ N(0, dt).
//!
//! The true parameters may drift slowly according to a per-parameter
//! sinusoidal schedule θ_j(t) = base_j + A_j·sin(ω_j·γ·t), with ω_j given on
//! the γ·t axis.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

use crate::algebra::{renormalize, DensityOperator};
use crate::error::{Error, Result};
use crate::model::{DiffusiveModel, KrausContext};

/// Deterministic Gaussian stream: ChaCha12 keyed by a 64-bit seed, mapped to
/// standard normals by the Box–Muller transform
/// z = √(−2·ln u₁)·cos(2π·u₂) with u₁ ∈ (0, 1], u₂ ∈ [0, 1).
/// Fixed and documented so records replay bit-identically for a given seed.
pub struct GaussianStream {
    rng: ChaCha12Rng,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        GaussianStream {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// One uniform variate in [0, 1).
    #[inline]
    pub(crate) fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits → uniform in [0, 1)
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard normal variate (one Box–Muller pair per call, cosine
    /// branch only, so the draw count per step is fixed).
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Sinusoidal perturbation of one parameter: amplitude·sin(frequency·γ·t).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    /// Angular frequency on the γ·t axis.
    pub frequency: f64,
}

/// True-parameter schedule in natural coordinates: static base values plus
/// optional per-parameter sinusoids on the γ·t time axis.
#[derive(Clone, Debug)]
pub struct TruthSchedule {
    base: Vec<f64>,
    perturbations: Vec<Option<Sinusoid>>,
    /// Scale of the γ·t axis the sinusoid frequencies refer to.
    gamma: f64,
}

impl TruthSchedule {
    /// Static truth at `base` (natural coordinates).
    pub fn constant(base: Vec<f64>) -> Self {
        let n = base.len();
        TruthSchedule {
            base,
            perturbations: vec![None; n],
            gamma: 0.0,
        }
    }

    /// Truth with sinusoidal drift; `perturbations` must match `base` in
    /// length, `gamma` sets the γ·t axis scale.
    pub fn with_sinusoids(
        base: Vec<f64>,
        perturbations: Vec<Option<Sinusoid>>,
        gamma: f64,
    ) -> Result<Self> {
        if perturbations.len() != base.len() {
            return Err(Error::InvalidArgument(format!(
                "{} perturbation entries for {} parameters",
                perturbations.len(),
                base.len()
            )));
        }
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "schedule gamma = {gamma} must be finite and non-negative"
            )));
        }
        Ok(TruthSchedule {
            base,
            perturbations,
            gamma,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn is_static(&self) -> bool {
        self.perturbations.iter().all(|p| p.is_none())
    }

    /// θ(t) in natural coordinates.
    pub fn theta_at(&self, t: f64) -> Vec<f64> {
        let mut out = self.base.clone();
        self.write_theta_at(t, &mut out);
        out
    }

    /// In-place variant of [`theta_at`](Self::theta_at) for hot loops.
    #[inline]
    pub fn write_theta_at(&self, t: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.base);
        for (x, p) in out.iter_mut().zip(&self.perturbations) {
            if let Some(s) = p {
                *x += s.amplitude * (s.frequency * self.gamma * t).sin();
            }
        }
    }

    /// Checks that base ± amplitude stays within the model's natural bounds,
    /// so every evaluated θ(t) is admissible.
    pub fn validate_against<M: DiffusiveModel + ?Sized>(&self, model: &M) -> Result<()> {
        let spec = model.params();
        if self.len() != spec.len() {
            return Err(Error::InvalidArgument(format!(
                "schedule has {} parameters, model declares {}",
                self.len(),
                spec.len()
            )));
        }
        for (j, d) in spec.defs().iter().enumerate() {
            let amp = self.perturbations[j].map_or(0.0, |s| s.amplitude.abs());
            let (min, max) = (self.base[j] - amp, self.base[j] + amp);
            if !min.is_finite() || !max.is_finite() || min < d.lo || max > d.hi {
                return Err(Error::OutOfBounds {
                    name: d.name.clone(),
                    value: if min < d.lo { min } else { max },
                    lo: d.lo,
                    hi: d.hi,
                });
            }
        }
        Ok(())
    }
}

/// One logged simulation step.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    /// Number of completed steps (1-based).
    pub step: usize,
    pub t: f64,
    pub dy: f64,
    /// θ(t) in natural coordinates at the start of the step.
    pub theta_true: Vec<f64>,
    /// Bloch vector of the post-step true state (two-level systems).
    pub bloch: Option<[f64; 3]>,
}

/// Full simulation output: the undecimated measurement record plus decimated
/// per-step summaries.
#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub decimation: usize,
    pub seed: u64,
    /// Complete dy record, one entry per step.
    pub dy: Vec<f64>,
    /// Every `decimation`-th step (the d-th, 2d-th, ... completed steps).
    pub records: Vec<TrajectoryRecord>,
    /// Final true state.
    pub final_state: DensityOperator,
}

/// Advances the true state one step under outcome noise `dw`:
/// dy = √η·Tr((L+L†)ρ)·dt + dW, ρ' = K_dy(ρ)/Tr(K_dy(ρ)).
pub fn step_true(
    ctx: &KrausContext,
    rho: &DensityOperator,
    dw: f64,
) -> Result<(DensityOperator, f64)> {
    let s = ctx.expectation(rho.op());
    let dy = ctx.sqrt_eta() * s * ctx.dt() + dw;
    let next = renormalize(&ctx.apply(rho.op(), dy))?;
    Ok((next, dy))
}

/// Simulates `steps` measurement steps from `rho0` under the given truth
/// schedule, collecting the full dy record and decimated summaries.
pub fn simulate<M: DiffusiveModel + ?Sized>(
    model: &M,
    schedule: &TruthSchedule,
    steps: usize,
    seed: u64,
    rho0: &DensityOperator,
    decimation: usize,
) -> Result<TrajectoryLog> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    if decimation == 0 {
        return Err(Error::InvalidArgument("decimation must be positive".into()));
    }
    schedule.validate_against(model)?;
    if rho0.dim() != model.dim() {
        return Err(Error::DimensionMismatch(rho0.dim(), model.dim()));
    }

    let dt = model.dt();
    let sqrt_dt = dt.sqrt();
    let mut noise = GaussianStream::new(seed);
    let mut rho = rho0.clone();
    let mut dy_record = Vec::with_capacity(steps);
    let mut records = Vec::with_capacity(steps / decimation + 1);
    let is_static = schedule.is_static();
    let mut theta = schedule.theta_at(0.0);
    let mut ctx = KrausContext::new(model, &model.params().to_working(&theta)?)?;

    for k in 0..steps {
        let t = k as f64 * dt;
        if !is_static {
            schedule.write_theta_at(t, &mut theta);
            ctx = KrausContext::new(model, &model.params().to_working(&theta)?)
                .map_err(|e| step_error(e, k))?;
        }
        let dw = sqrt_dt * noise.standard_normal();
        let (next, dy) = step_true(&ctx, &rho, dw).map_err(|e| step_error(e, k))?;
        rho = next;
        dy_record.push(dy);
        if (k + 1) % decimation == 0 {
            records.push(TrajectoryRecord {
                step: k + 1,
                t: (k + 1) as f64 * dt,
                dy,
                theta_true: theta.clone(),
                bloch: (model.dim() == 2).then(|| rho.bloch()),
            });
        }
    }

    Ok(TrajectoryLog {
        dt,
        decimation,
        seed,
        dy: dy_record,
        records,
        final_state: rho,
    })
}

/// Attaches the step index to errors raised inside a propagation loop.
pub(crate) fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::DegenerateTrace { trace, threshold } => Error::DegenerateUpdate {
            step,
            trace,
            threshold,
        },
        other => other,
    }
}
