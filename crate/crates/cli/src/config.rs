//! Experiment configuration: TOML sections, validation, and conversion into
//! library objects. Experiments are defined in a config file; command-line
//! flags only select the command and override seeds, output directory and
//! decimation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qmle::algebra::{ket_projector, maximally_mixed, DensityOperator};
use qmle::estimator::LearningRate;
use qmle::model::{DiffusiveModel, FixedParamModel, TwoLevelModel, TWO_LEVEL_PARAMS};
use qmle::sim::{Sinusoid, TruthSchedule};

/// Top-level experiment description, one sectioned TOML file per experiment.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<OfflineSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckSection>,
}

/// Two-level system parameters (natural coordinates) and discretization.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub omega: f64,
    pub delta: f64,
    pub eta: f64,
    pub kappa: f64,
    pub dt: f64,
    /// Hilbert-space dimension; optional, must be 2 (the only built-in model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

/// True data-generating parameters. Static values default to the model
/// section; an optional sinusoidal perturbation per parameter rides on top,
/// with angular frequencies on the γ·t axis.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    /// γ defining the sinusoid time axis; defaults to the estimator's
    /// constant learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sinusoid: BTreeMap<String, SinusoidSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidSection {
    pub amplitude: f64,
    /// Angular frequency on the γ·t axis.
    pub frequency: f64,
}

/// Initial estimate, learning-rate schedule, fixed (non-updated) parameters
/// and natural-coordinate box bounds.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub theta0: Theta0Section,
    /// Constant learning rate; exactly one of `gamma` / `gamma_schedule`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_schedule: Option<GammaSchedule>,
    /// Parameters held at their theta0 value instead of being estimated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<String>,
    /// Natural-coordinate bounds per parameter, `name = [lo, hi]`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Theta0Section {
    pub omega: f64,
    pub delta: f64,
    pub eta: f64,
    pub kappa: f64,
}

/// Learning-rate schedules beyond a plain constant.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaSchedule {
    Constant { gamma: f64 },
    /// `segments = [[t_start, gamma], ...]`, first segment at t = 0.
    Piecewise { segments: Vec<(f64, f64)> },
    /// γ_t = γ₀·(1 + t/t₀)^(−α).
    PowerDecay { gamma0: f64, t0: f64, alpha: f64 },
}

/// Horizon, seeds and output layout.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Alternative to `steps`: horizon T with steps = T/dt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    /// Log every d-th step (default 100).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decimation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Estimate/offline-ml only: replay this undecimated trajectory CSV
    /// instead of simulating a record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
}

/// Batch gradient-ascent options (offline-ml command).
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_schedule: Option<GammaSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    /// Gradient ∞-norm stopping tolerance; omitted uses the adaptive default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Halve the step when a proposal decreases the likelihood (default on).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtracking: Option<bool>,
}

/// Gradient-check options (gradcheck command).
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    /// Record length (default 20000).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Finite-difference step sweep (default [1e-4, 1e-5, 1e-6]).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    /// Worst acceptable relative error (default 1e-4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Replace the two-level model by a parameter-free mock whose single
    /// inert parameter does not enter the dynamics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<bool>,
}

pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file `{}`", path.display()))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .with_context(|| format!("invalid config file `{}`", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !(m.dt > 0.0) || !m.dt.is_finite() {
            bail!("[model] dt = {} must be finite and positive", m.dt);
        }
        if let Some(n) = m.n {
            if n != 2 {
                bail!("[model] n = {n}: only the two-level model (n = 2) is built in");
            }
        }
        if let Some(truth) = &self.truth {
            for name in truth.sinusoid.keys() {
                if !TWO_LEVEL_PARAMS.contains(&name.as_str()) {
                    bail!("[truth.sinusoid] unknown parameter name `{name}`");
                }
            }
        }
        if let Some(est) = &self.estimator {
            match (est.gamma, &est.gamma_schedule) {
                (Some(_), Some(_)) => {
                    bail!("[estimator] gamma and gamma_schedule are mutually exclusive")
                }
                (None, None) => {
                    bail!("[estimator] one of gamma or gamma_schedule is required")
                }
                _ => {}
            }
            for (name, [lo, hi]) in &est.bounds {
                if !TWO_LEVEL_PARAMS.contains(&name.as_str()) {
                    bail!("[estimator.bounds] unknown parameter name `{name}`");
                }
                if !(lo <= hi) {
                    bail!("[estimator.bounds] {name} = [{lo}, {hi}] has lo > hi");
                }
            }
        }
        if let Some(offline) = &self.offline {
            if offline.gamma.is_some() && offline.gamma_schedule.is_some() {
                bail!("[offline] gamma and gamma_schedule are mutually exclusive");
            }
        }
        if let Some(run) = &self.run {
            if let Some(d) = run.decimation {
                if d == 0 {
                    bail!("[run] decimation must be positive");
                }
            }
            if let Some(seeds) = &run.seeds {
                if seeds.is_empty() {
                    bail!("[run] seeds must not be empty");
                }
            }
        }
        Ok(())
    }

    /// Natural parameter vector of the model section, canonical order.
    pub fn model_theta(&self) -> [f64; 4] {
        let m = &self.model;
        [m.omega, m.delta, m.eta, m.kappa]
    }

    /// The simulation model (default bounds; the truth never clamps).
    pub fn build_model(&self) -> Result<TwoLevelModel> {
        TwoLevelModel::new(self.model.dt).context("[model] rejected")
    }

    /// The data-generating schedule: model values, overridden by static
    /// truth values, plus optional per-parameter sinusoids.
    pub fn build_truth_schedule(&self) -> Result<TruthSchedule> {
        let mut base = self.model_theta().to_vec();
        let truth = self.truth.clone().unwrap_or_default();
        for (slot, value) in base.iter_mut().zip([
            truth.omega,
            truth.delta,
            truth.eta,
            truth.kappa,
        ]) {
            if let Some(v) = value {
                *slot = v;
            }
        }
        if truth.sinusoid.is_empty() {
            return Ok(TruthSchedule::constant(base));
        }
        let gamma = match (truth.gamma, self.estimator.as_ref().and_then(|e| e.gamma)) {
            (Some(g), _) => g,
            (None, Some(g)) => g,
            (None, None) => bail!(
                "[truth] sinusoids need a γ·t axis: set truth.gamma or a constant estimator.gamma"
            ),
        };
        let perturbations = TWO_LEVEL_PARAMS
            .iter()
            .map(|name| {
                truth.sinusoid.get(*name).map(|s| Sinusoid {
                    amplitude: s.amplitude,
                    frequency: s.frequency,
                })
            })
            .collect();
        TruthSchedule::with_sinusoids(base, perturbations, gamma).context("[truth] rejected")
    }

    pub fn estimator_section(&self) -> Result<&EstimatorSection> {
        self.estimator
            .as_ref()
            .context("this command needs an [estimator] section")
    }

    pub fn learning_rate(&self) -> Result<LearningRate> {
        let est = self.estimator_section()?;
        let lr = match (&est.gamma, &est.gamma_schedule) {
            (Some(g), None) => LearningRate::Constant(*g),
            (None, Some(s)) => s.to_learning_rate(),
            _ => unreachable!("validated at load"),
        };
        lr.validate().context("[estimator] rejected")?;
        Ok(lr)
    }
}

impl GammaSchedule {
    pub fn to_learning_rate(&self) -> LearningRate {
        match self {
            GammaSchedule::Constant { gamma } => LearningRate::Constant(*gamma),
            GammaSchedule::Piecewise { segments } => LearningRate::Piecewise(segments.clone()),
            GammaSchedule::PowerDecay { gamma0, t0, alpha } => LearningRate::PowerDecay {
                gamma0: *gamma0,
                t0: *t0,
                alpha: *alpha,
            },
        }
    }
}

/// Estimation model: the full two-level model, or the same model with some
/// parameters pinned at their initial values.
pub enum EstModel {
    Full(TwoLevelModel),
    Pinned(FixedParamModel<TwoLevelModel>),
}

impl EstModel {
    pub fn as_dyn(&self) -> &(dyn DiffusiveModel + '_) {
        match self {
            EstModel::Full(m) => m,
            EstModel::Pinned(m) => m,
        }
    }

    /// All four natural parameters (pinned ones included) for a working
    /// vector of the estimation model.
    pub fn full_natural(&self, w: &[f64]) -> Vec<f64> {
        match self {
            EstModel::Full(m) => m.params().to_natural(w),
            EstModel::Pinned(m) => m.inner().params().to_natural(&m.full_working(w)),
        }
    }
}

/// Initial estimate in working coordinates plus the estimation model
/// honoring `[estimator]` bounds and fixed parameters.
pub fn build_estimator(cfg: &ExperimentConfig) -> Result<(EstModel, Vec<f64>)> {
    let est = cfg.estimator_section()?;
    let mut bounds = [
        (f64::NEG_INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::INFINITY),
        (0.0, 1.0),
        (0.0, f64::INFINITY),
    ];
    for (name, [lo, hi]) in &est.bounds {
        let j = TWO_LEVEL_PARAMS
            .iter()
            .position(|p| p == name)
            .expect("validated at load");
        bounds[j] = (*lo, *hi);
    }
    let inner = TwoLevelModel::with_bounds(cfg.model.dt, bounds).context("[estimator] rejected")?;
    let t0 = &est.theta0;
    let theta0 = [t0.omega, t0.delta, t0.eta, t0.kappa];
    let full_w0 = inner
        .params()
        .to_working(&theta0)
        .context("[estimator] theta0 rejected")?;

    if est.fixed.is_empty() {
        return Ok((EstModel::Full(inner), full_w0));
    }
    let pinned: Vec<&str> = est.fixed.iter().map(String::as_str).collect();
    let model =
        FixedParamModel::new(inner, &full_w0, &pinned).context("[estimator] fixed rejected")?;
    let free_w0 = {
        let free_names = model.params().names();
        let mut w = Vec::with_capacity(free_names.len());
        for name in free_names {
            let j = TWO_LEVEL_PARAMS
                .iter()
                .position(|p| *p == name)
                .expect("free names come from the canonical set");
            w.push(full_w0[j]);
        }
        w
    };
    Ok((EstModel::Pinned(model), free_w0))
}

/// Initial true state |0⟩⟨0| used by the simulator.
pub fn simulation_initial_state() -> DensityOperator {
    ket_projector(2, 0).expect("two-level basis state")
}

/// Initial filter state I/2 (complete ignorance).
pub fn filter_initial_state() -> DensityOperator {
    maximally_mixed(2)
}

/// Built-in experiment definitions for the two bundled example protocols.
/// `1a`: static truth (1, 0.2, 0.7, 0.1), estimates from (1.3, 0.3, 0.6,
/// 0.15). `1b`: sinusoidal truth around the same values, estimates from
/// (1.3, 0.3, 0.8, 0.15). Both run 2·10⁷ steps at dt = 1e-2 with γ = 1e-4,
/// so the γ·t axis spans [0, 20].
pub fn figure_config(which: &str) -> Option<ExperimentConfig> {
    let (theta0, sinusoid) = match which {
        "1a" => (
            Theta0Section {
                omega: 1.3,
                delta: 0.3,
                eta: 0.6,
                kappa: 0.15,
            },
            BTreeMap::new(),
        ),
        "1b" => {
            let mut s = BTreeMap::new();
            let entry = |amplitude, frequency| SinusoidSection {
                amplitude,
                frequency,
            };
            s.insert("omega".to_string(), entry(0.5, 0.12));
            s.insert("delta".to_string(), entry(0.16, 0.12));
            s.insert("eta".to_string(), entry(0.2, 0.05));
            s.insert("kappa".to_string(), entry(0.1, 0.11));
            (
                Theta0Section {
                    omega: 1.3,
                    delta: 0.3,
                    eta: 0.8,
                    kappa: 0.15,
                },
                s,
            )
        }
        _ => return None,
    };
    Some(ExperimentConfig {
        model: ModelSection {
            omega: 1.0,
            delta: 0.2,
            eta: 0.7,
            kappa: 0.1,
            dt: 1e-2,
            n: Some(2),
        },
        truth: Some(TruthSection {
            sinusoid,
            ..TruthSection::default()
        }),
        estimator: Some(EstimatorSection {
            theta0,
            gamma: Some(1e-4),
            gamma_schedule: None,
            fixed: Vec::new(),
            bounds: BTreeMap::new(),
        }),
        run: Some(RunSection {
            steps: Some(20_000_000),
            seeds: Some(vec![1]),
            ..RunSection::default()
        }),
        offline: None,
        gradcheck: None,
    })
}
