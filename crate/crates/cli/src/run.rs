//! Command implementations: seeded experiment orchestration over a worker
//! pool, with per-seed output files and a cross-seed summary written after
//! all workers join.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, Context, Result};

use qmle::algebra::Operator;
use qmle::estimator::{run_online, EstimateLog, RunOptions};
use qmle::model::{DiffusiveModel, ParamDef, ParamSpec, Reparam, TwoLevelModel};
use qmle::offline::{finite_diff_grad, grad_total, offline_ascent, AscentOptions};
use qmle::sim::{simulate, TruthSchedule};

use crate::config::{
    build_estimator, filter_initial_state, simulation_initial_state, EstModel, ExperimentConfig,
    RunSection,
};
use crate::output::{
    dy_digest, read_trajectory_csv, write_estimate_csv, write_manifest, write_offline_csv,
    write_offline_summary_csv, write_summary_csv, write_trajectory_csv, Manifest, SummaryRow,
    MANIFEST_FORMAT,
};

/// A failure of numerical origin (as opposed to configuration or I/O);
/// mapped to exit status 2.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// Command-line overrides of the `[run]` section.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub decimation: Option<usize>,
    pub strict_positivity: bool,
}

/// The `[run]` section resolved against command-line overrides and defaults.
pub struct RunPlan {
    /// Record length; 0 when a replay file defines it.
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub decimation: usize,
    pub out: PathBuf,
    pub replay: Option<PathBuf>,
    pub strict_positivity: bool,
}

pub fn plan_run(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<RunPlan> {
    let run = cfg.run.clone().unwrap_or_default();
    let dt = cfg.model.dt;
    let steps = match (run.steps, run.total_time) {
        (Some(s), None) => s,
        (None, Some(t)) => {
            if !(t > 0.0) || !t.is_finite() {
                bail!("[run] total_time = {t} must be finite and positive");
            }
            (t / dt).round() as usize
        }
        (Some(s), Some(t)) => {
            if (s as f64 * dt - t).abs() > 0.5 * dt {
                bail!(
                    "[run] steps = {s} and total_time = {t} disagree: steps*dt = {}",
                    s as f64 * dt
                );
            }
            s
        }
        (None, None) => {
            if run.replay.is_none() {
                bail!("[run] needs steps or total_time");
            }
            0
        }
    };
    if steps == 0 && run.replay.is_none() {
        bail!("[run] steps must be positive");
    }
    let seeds = overrides
        .seeds
        .clone()
        .or_else(|| run.seeds.clone())
        .unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        bail!("seed list must not be empty");
    }
    if run.replay.is_some() && seeds.len() != 1 {
        bail!(
            "replay runs consume a fixed record; give exactly one seed \
             (it only labels the output files), got {:?}",
            seeds
        );
    }
    let decimation = overrides
        .decimation
        .or(run.decimation)
        .unwrap_or(100)
        .max(1);
    if steps > 0 && decimation > steps {
        bail!("[run] decimation {decimation} exceeds steps {steps}: no rows would be logged");
    }
    Ok(RunPlan {
        steps,
        seeds,
        decimation,
        out: overrides
            .out
            .clone()
            .or_else(|| run.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        replay: run.replay.clone(),
        strict_positivity: overrides.strict_positivity,
    })
}

/// Dispatches seeds to a worker pool (one worker per available core, capped
/// by the seed count); results are collected and re-ordered by seed so the
/// summary is deterministic.
fn run_seeds<R, F>(seeds: &[u64], f: F) -> Result<Vec<(u64, R)>>
where
    R: Send,
    F: Fn(u64) -> Result<R> + Sync,
{
    let workers = thread::available_parallelism()
        .map(usize::from)
        .unwrap_or(1)
        .min(seeds.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(seeds.len()));
    thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| -> Result<()> {
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(&seed) = seeds.get(i) else {
                            return Ok(());
                        };
                        let r = f(seed).with_context(|| format!("seed {seed}"))?;
                        results.lock().unwrap().push((seed, r));
                    }
                })
            })
            .collect();
        let mut first_error = None;
        for handle in handles {
            let outcome = handle.join().expect("worker panicked");
            if first_error.is_none() {
                first_error = outcome.err();
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    })?;
    let mut collected = results.into_inner().unwrap();
    collected.sort_by_key(|(seed, _)| *seed);
    Ok(collected)
}

/// The config as it would have to be written to reproduce one seed's output.
fn effective_config(cfg: &ExperimentConfig, plan: &RunPlan, seed: u64, steps: usize) -> ExperimentConfig {
    let mut echo = cfg.clone();
    echo.run = Some(RunSection {
        steps: Some(steps),
        total_time: None,
        seeds: Some(vec![seed]),
        decimation: Some(plan.decimation),
        out: Some(plan.out.clone()),
        replay: plan.replay.clone(),
    });
    echo
}

fn manifest_path(out: &Path, prefix: &str, seed: u64) -> PathBuf {
    out.join(format!("{prefix}_seed{seed}.manifest.toml"))
}

fn csv_path(out: &Path, prefix: &str, seed: u64) -> PathBuf {
    out.join(format!("{prefix}_seed{seed}.csv"))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<()> {
    let plan = plan_run(cfg, overrides)?;
    if plan.replay.is_some() {
        bail!("[run] replay does not apply to simulate");
    }
    let model = cfg.build_model()?;
    let schedule = cfg.build_truth_schedule()?;
    schedule.validate_against(&model)?;
    let names = model.params().names();
    std::fs::create_dir_all(&plan.out)
        .with_context(|| format!("cannot create output directory `{}`", plan.out.display()))?;

    run_seeds(&plan.seeds, |seed| -> Result<PathBuf> {
        let log = simulate(
            &model,
            &schedule,
            plan.steps,
            seed,
            &simulation_initial_state(),
            plan.decimation,
        )?;
        let path = csv_path(&plan.out, "trajectory", seed);
        write_trajectory_csv(&path, &names, &log)?;
        write_manifest(
            &manifest_path(&plan.out, "trajectory", seed),
            &Manifest {
                format: MANIFEST_FORMAT,
                command: "simulate",
                code_version: env!("CARGO_PKG_VERSION"),
                seed,
                steps: plan.steps,
                dt: cfg.model.dt,
                decimation: plan.decimation,
                source: "simulated".to_string(),
                dy_sha256: dy_digest(&log.dy),
                config: &effective_config(cfg, &plan, seed, plan.steps),
            },
        )?;
        println!(
            "simulate seed {seed}: {} steps -> {}",
            plan.steps,
            path.display()
        );
        Ok(path)
    })?;
    Ok(())
}

/// Per-seed record source for the estimator-driven commands.
enum Record {
    Simulated(Vec<f64>),
    Replayed {
        dys: Vec<f64>,
        truth_at_rows: Vec<Vec<f64>>,
        path: PathBuf,
    },
}

impl Record {
    fn dys(&self) -> &[f64] {
        match self {
            Record::Simulated(d) => d,
            Record::Replayed { dys, .. } => dys,
        }
    }

    fn source(&self) -> String {
        match self {
            Record::Simulated(_) => "simulated".to_string(),
            Record::Replayed { path, .. } => format!("replay:{}", path.display()),
        }
    }
}

fn obtain_record(
    cfg: &ExperimentConfig,
    plan: &RunPlan,
    schedule: &TruthSchedule,
    seed: u64,
    names: &[&str],
) -> Result<Record> {
    match &plan.replay {
        Some(path) => {
            let rr = read_trajectory_csv(path, names, cfg.model.dt, plan.decimation)?;
            if plan.steps != 0 && plan.steps != rr.dys.len() {
                bail!(
                    "[run] steps = {} but replay `{}` holds {} steps",
                    plan.steps,
                    path.display(),
                    rr.dys.len()
                );
            }
            Ok(Record::Replayed {
                dys: rr.dys,
                truth_at_rows: rr.truth_at_rows,
                path: path.clone(),
            })
        }
        None => {
            let model = cfg.build_model()?;
            // Full-resolution record only; the decimated per-step summaries
            // are not needed here.
            let log = simulate(
                &model,
                schedule,
                plan.steps,
                seed,
                &simulation_initial_state(),
                plan.steps,
            )?;
            Ok(Record::Simulated(log.dy))
        }
    }
}

/// Tail window over which summary statistics are computed: the final 10% of
/// the record.
fn tail_start(steps: usize) -> usize {
    steps - steps / 10
}

fn tail_stats(log: &EstimateLog, est: &EstModel, from_step: usize) -> Vec<(f64, f64)> {
    let tail: Vec<Vec<f64>> = log
        .rows
        .iter()
        .filter(|r| r.step > from_step)
        .map(|r| est.full_natural(&r.theta_working))
        .collect();
    let n = tail.len().max(1) as f64;
    (0..4)
        .map(|j| {
            let mean = tail.iter().map(|t| t[j]).sum::<f64>() / n;
            let var = if tail.len() < 2 {
                0.0
            } else {
                tail.iter().map(|t| (t[j] - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64
            };
            (mean, var.sqrt())
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite summary statistics"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn cmd_estimate(cfg: &ExperimentConfig, overrides: &Overrides, prefix: &str) -> Result<()> {
    let plan = plan_run(cfg, overrides)?;
    let schedule = cfg.build_truth_schedule()?;
    let lr = cfg.learning_rate()?;
    // Validate estimator construction once up front for fast failure.
    build_estimator(cfg)?;
    let base_model = TwoLevelModel::new(cfg.model.dt)?;
    let names = base_model.params().names();
    std::fs::create_dir_all(&plan.out)
        .with_context(|| format!("cannot create output directory `{}`", plan.out.display()))?;

    let per_seed = run_seeds(&plan.seeds, |seed| -> Result<Vec<(f64, f64)>> {
        let (est, w0) = build_estimator(cfg)?;
        let record = obtain_record(cfg, &plan, &schedule, seed, &names)?;
        let steps = record.dys().len();
        let options = RunOptions {
            strict_positivity: plan.strict_positivity,
            decimation: plan.decimation,
            ..RunOptions::default()
        };
        let log = run_online(
            est.as_dyn(),
            record.dys().iter().copied(),
            &w0,
            lr.clone(),
            filter_initial_state(),
            &options,
        )?;

        let path = csv_path(&plan.out, prefix, seed);
        write_estimate_csv(
            &path,
            &names,
            &log,
            |w| est.full_natural(w),
            |i, t| match &record {
                Record::Simulated(_) => schedule.theta_at(t),
                Record::Replayed { truth_at_rows, .. } => truth_at_rows[i].clone(),
            },
        )?;
        write_manifest(
            &manifest_path(&plan.out, prefix, seed),
            &Manifest {
                format: MANIFEST_FORMAT,
                command: "estimate",
                code_version: env!("CARGO_PKG_VERSION"),
                seed,
                steps,
                dt: cfg.model.dt,
                decimation: plan.decimation,
                source: record.source(),
                dy_sha256: dy_digest(record.dys()),
                config: &effective_config(cfg, &plan, seed, steps),
            },
        )?;
        if let Some(failure) = log.failure {
            return Err(anyhow::Error::new(failure).context(format!(
                "estimation stopped after step {}; partial log in {}",
                log.steps,
                path.display()
            )));
        }
        let stats = tail_stats(&log, &est, tail_start(steps));
        let theta: Vec<String> = names
            .iter()
            .zip(&stats)
            .map(|(n, (mean, _))| format!("{n} {mean:.6}"))
            .collect();
        println!(
            "{prefix} seed {seed}: {} steps, tail mean {} -> {}",
            steps,
            theta.join(", "),
            path.display()
        );
        Ok(stats)
    })?;

    let mut rows = Vec::new();
    for (seed, stats) in &per_seed {
        for (name, (mean, std)) in names.iter().zip(stats) {
            rows.push(SummaryRow {
                seed: seed.to_string(),
                param: name.to_string(),
                tail_mean: *mean,
                tail_std: *std,
            });
        }
    }
    for (j, name) in names.iter().enumerate() {
        let mut means: Vec<f64> = per_seed.iter().map(|(_, s)| s[j].0).collect();
        let mut stds: Vec<f64> = per_seed.iter().map(|(_, s)| s[j].1).collect();
        rows.push(SummaryRow {
            seed: "median".to_string(),
            param: name.to_string(),
            tail_mean: median(&mut means),
            tail_std: median(&mut stds),
        });
    }
    let summary = plan.out.join(format!("{prefix}_summary.csv"));
    write_summary_csv(&summary, &rows)?;
    println!("summary -> {}", summary.display());
    Ok(())
}

pub fn cmd_offline_ml(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<()> {
    let plan = plan_run(cfg, overrides)?;
    let schedule = cfg.build_truth_schedule()?;
    build_estimator(cfg)?;
    let base_model = TwoLevelModel::new(cfg.model.dt)?;
    let names = base_model.params().names();
    let off = cfg.offline.clone().unwrap_or_default();
    let defaults = AscentOptions::default();
    let options = AscentOptions {
        schedule: match (&off.gamma, &off.gamma_schedule) {
            (Some(g), None) => qmle::estimator::LearningRate::Constant(*g),
            (None, Some(s)) => s.to_learning_rate(),
            (None, None) => defaults.schedule.clone(),
            (Some(_), Some(_)) => unreachable!("validated at load"),
        },
        max_iters: off.max_iters.unwrap_or(defaults.max_iters),
        tol: off.tol,
        backtracking: off.backtracking.unwrap_or(defaults.backtracking),
    };
    std::fs::create_dir_all(&plan.out)
        .with_context(|| format!("cannot create output directory `{}`", plan.out.display()))?;

    let per_seed = run_seeds(&plan.seeds, |seed| -> Result<Vec<f64>> {
        let (est, w0) = build_estimator(cfg)?;
        let record = obtain_record(cfg, &plan, &schedule, seed, &names)?;
        let steps = record.dys().len();
        let result = offline_ascent(
            est.as_dyn(),
            &w0,
            record.dys(),
            &filter_initial_state(),
            &options,
        )?;

        let path = csv_path(&plan.out, "offline", seed);
        write_offline_csv(
            &path,
            &names,
            result
                .theta_trace
                .iter()
                .zip(&result.loglik_trace)
                .zip(&result.grad_norm_trace)
                .enumerate()
                .map(|(i, ((w, ll), g))| (i, *ll, *g, est.full_natural(w))),
        )?;
        write_manifest(
            &manifest_path(&plan.out, "offline", seed),
            &Manifest {
                format: MANIFEST_FORMAT,
                command: "offline-ml",
                code_version: env!("CARGO_PKG_VERSION"),
                seed,
                steps,
                dt: cfg.model.dt,
                decimation: plan.decimation,
                source: record.source(),
                dy_sha256: dy_digest(record.dys()),
                config: &effective_config(cfg, &plan, seed, steps),
            },
        )?;
        let theta = est.full_natural(result.theta());
        let rendered: Vec<String> = names
            .iter()
            .zip(&theta)
            .map(|(n, v)| format!("{n} {v:.6}"))
            .collect();
        println!(
            "offline-ml seed {seed}: {} after {} iterations (converged: {}, loglik {:.6}) -> {}",
            rendered.join(", "),
            result.iterations,
            result.converged,
            result.loglik_trace.last().copied().unwrap_or(f64::NAN),
            path.display()
        );
        Ok(theta)
    })?;

    let mut rows = Vec::new();
    for (seed, theta) in &per_seed {
        for (name, value) in names.iter().zip(theta) {
            rows.push((seed.to_string(), name.to_string(), *value));
        }
    }
    for (j, name) in names.iter().enumerate() {
        let mut values: Vec<f64> = per_seed.iter().map(|(_, t)| t[j]).collect();
        rows.push(("median".to_string(), name.to_string(), median(&mut values)));
    }
    let summary = plan.out.join("offline_summary.csv");
    write_offline_summary_csv(&summary, &rows)?;
    println!("summary -> {}", summary.display());
    Ok(())
}

/// A single-parameter model whose parameter does not enter the dynamics:
/// the gradient of any record's likelihood is identically zero. Used to
/// exercise the gradient check's degenerate path.
struct InertModel {
    inner: TwoLevelModel,
    w: Vec<f64>,
    spec: ParamSpec,
}

impl InertModel {
    fn new(inner: TwoLevelModel, w: Vec<f64>) -> Result<Self> {
        let spec = ParamSpec::new(vec![ParamDef::new(
            "inert",
            Reparam::Identity,
            f64::NEG_INFINITY,
            f64::INFINITY,
        )])?;
        Ok(InertModel { inner, w, spec })
    }
}

impl DiffusiveModel for InertModel {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn params(&self) -> &ParamSpec {
        &self.spec
    }

    fn hamiltonian(&self, _w: &[f64]) -> Operator {
        self.inner.hamiltonian(&self.w)
    }

    fn hamiltonian_deriv(&self, _w: &[f64], _j: usize) -> Operator {
        Operator::zeros(self.inner.dim())
    }

    fn lindblad(&self, _w: &[f64]) -> Operator {
        self.inner.lindblad(&self.w)
    }

    fn lindblad_deriv(&self, _w: &[f64], _j: usize) -> Operator {
        Operator::zeros(self.inner.dim())
    }

    fn sqrt_efficiency(&self, _w: &[f64]) -> f64 {
        self.inner.sqrt_efficiency(&self.w)
    }

    fn sqrt_efficiency_deriv(&self, _w: &[f64], _j: usize) -> f64 {
        0.0
    }
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<()> {
    let gc = cfg.gradcheck.clone().unwrap_or_default();
    let steps = gc.steps.unwrap_or(20_000);
    if steps == 0 {
        bail!("[gradcheck] steps must be positive");
    }
    let epsilons = gc
        .epsilons
        .clone()
        .unwrap_or_else(|| vec![1e-4, 1e-5, 1e-6]);
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        bail!("[gradcheck] epsilons must be positive and finite");
    }
    let tolerance = gc.tolerance.unwrap_or(1e-4);
    let mock = gc.mock.unwrap_or(false);
    let seeds = overrides
        .seeds
        .clone()
        .or_else(|| cfg.run.as_ref().and_then(|r| r.seeds.clone()))
        .unwrap_or_else(|| vec![0]);

    let sim_model = cfg.build_model()?;
    let theta = cfg.model_theta();
    let w_full = sim_model.params().to_working(&theta)?;
    let schedule = cfg.build_truth_schedule()?;
    let inert;
    let (model, w): (&dyn DiffusiveModel, Vec<f64>) = if mock {
        inert = InertModel::new(sim_model.clone(), w_full.clone())?;
        (&inert, vec![0.0])
    } else {
        (&sim_model, w_full)
    };
    let names = model.params().names();
    let rho0 = filter_initial_state();

    println!(
        "gradcheck: parameters [{}] over {steps}-step records, tolerance {tolerance:.1e}",
        names.join(", ")
    );
    let mut worst: Option<(u64, f64, String, f64)> = None; // seed, eps, param, rel
    for &seed in &seeds {
        let record = simulate(
            &sim_model,
            &schedule,
            steps,
            seed,
            &simulation_initial_state(),
            steps,
        )?;
        let recursive = grad_total(model, &w, &record.dy, &rho0)?;
        if mock && recursive.iter().all(|g| *g == 0.0) {
            println!("seed {seed}: gradient identically 0 for parameter `inert`");
        }
        println!("seed {seed}: relative error, recursive vs central finite differences");
        println!("  {:<10} {}", "eps", names.join("        "));
        for &eps in &epsilons {
            let fd = finite_diff_grad(model, &w, &record.dy, &rho0, eps)?;
            let mut cells = Vec::with_capacity(names.len());
            for ((r, f), name) in recursive.iter().zip(&fd).zip(&names) {
                let rel = (r - f).abs() / f.abs().max(1e-9);
                cells.push(format!("{rel:.3e}"));
                if worst.as_ref().map_or(true, |(_, _, _, w_rel)| rel > *w_rel) {
                    worst = Some((seed, eps, name.to_string(), rel));
                }
            }
            println!("  {eps:<10.1e} {}", cells.join("    "));
        }
    }
    let (seed, eps, param, rel) = worst.expect("at least one seed and epsilon");
    if rel > tolerance {
        println!("gradcheck: FAIL (parameter `{param}`)");
        return Err(NumericalFailure(format!(
            "gradcheck failed: parameter `{param}` relative error {rel:.3e} exceeds \
             {tolerance:.1e} at eps = {eps:.1e} (seed {seed})"
        ))
        .into());
    }
    println!("gradcheck: PASS (worst relative error {rel:.3e}, parameter `{param}`)");
    Ok(())
}

pub fn cmd_reproduce_figure(which: &str, overrides: &Overrides) -> Result<()> {
    let Some(cfg) = crate::config::figure_config(which) else {
        bail!("unknown figure `{which}`; available: 1a, 1b");
    };
    let prefix = format!("fig{which}");
    cmd_estimate(&cfg, overrides, &prefix)
}
