//! File formats: versioned CSV schemas, the per-seed run manifest, and the
//! measurement-record integrity digest.
//!
//! All floating-point columns are written with 16 fractional digits in
//! scientific notation, which round-trips every f64 exactly; identical runs
//! therefore produce byte-identical files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use qmle::estimator::EstimateLog;
use qmle::sim::TrajectoryLog;

use crate::config::ExperimentConfig;

pub const TRAJECTORY_HEADER: &str = "# qmle-trajectory-v1";
pub const ESTIMATE_HEADER: &str = "# qmle-estimate-v1";
pub const SUMMARY_HEADER: &str = "# qmle-summary-v1";
pub const OFFLINE_HEADER: &str = "# qmle-offline-v1";
pub const OFFLINE_SUMMARY_HEADER: &str = "# qmle-offline-summary-v1";
pub const MANIFEST_FORMAT: &str = "qmle-manifest-v1";

/// Exact text form of every float column: 17 significant digits round-trip
/// any f64 bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn param_columns(prefix: &str, names: &[&str]) -> String {
    names
        .iter()
        .map(|n| format!("{prefix}{n}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn trajectory_columns(names: &[&str]) -> String {
    format!(
        "step,t,dy,{},bloch_x,bloch_y,bloch_z",
        param_columns("theta_true_", names)
    )
}

pub fn estimate_columns(names: &[&str]) -> String {
    format!(
        "step,t,gamma_t,dy,innovation,{},{},loglik,bloch_x,bloch_y,bloch_z",
        param_columns("theta_est_", names),
        param_columns("theta_true_", names)
    )
}

pub fn write_trajectory_csv(path: &Path, names: &[&str], log: &TrajectoryLog) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    writeln!(out, "{}", trajectory_columns(names))?;
    let mut line = String::new();
    for rec in &log.records {
        line.clear();
        write!(line, "{},{},{}", rec.step, fmt_f64(rec.t), fmt_f64(rec.dy))?;
        for v in &rec.theta_true {
            write!(line, ",{}", fmt_f64(*v))?;
        }
        let b = rec.bloch.unwrap_or([f64::NAN; 3]);
        write!(line, ",{},{},{}", fmt_f64(b[0]), fmt_f64(b[1]), fmt_f64(b[2]))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the estimate log; `theta_full` maps a row's working estimate to
/// all model parameters (pinned ones included) and `truth_at` supplies the
/// true values for the i-th logged row.
pub fn write_estimate_csv(
    path: &Path,
    names: &[&str],
    log: &EstimateLog,
    theta_full: impl Fn(&[f64]) -> Vec<f64>,
    truth_at: impl Fn(usize, f64) -> Vec<f64>,
) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "{ESTIMATE_HEADER}")?;
    writeln!(out, "{}", estimate_columns(names))?;
    let mut line = String::new();
    for (i, row) in log.rows.iter().enumerate() {
        line.clear();
        write!(
            line,
            "{},{},{},{},{}",
            row.step,
            fmt_f64(row.t),
            fmt_f64(row.gamma_t),
            fmt_f64(row.dy),
            fmt_f64(row.innovation)
        )?;
        for v in theta_full(&row.theta_working) {
            write!(line, ",{}", fmt_f64(v))?;
        }
        for v in truth_at(i, row.t) {
            write!(line, ",{}", fmt_f64(v))?;
        }
        write!(line, ",{}", fmt_f64(row.loglik))?;
        let b = row.bloch.unwrap_or([f64::NAN; 3]);
        write!(line, ",{},{},{}", fmt_f64(b[0]), fmt_f64(b[1]), fmt_f64(b[2]))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// A replayed measurement record: the full dy stream plus the true
/// parameters at every `decimation`-th step.
pub struct ReplayRecord {
    pub dys: Vec<f64>,
    pub truth_at_rows: Vec<Vec<f64>>,
}

/// Reads an undecimated trajectory CSV back for replay. The file must carry
/// the versioned header, the exact column schema, contiguous steps 1..N and
/// a time column consistent with `expected_dt`.
pub fn read_trajectory_csv(
    path: &Path,
    names: &[&str],
    expected_dt: f64,
    decimation: usize,
) -> Result<ReplayRecord> {
    let file =
        File::open(path).with_context(|| format!("cannot open replay file `{}`", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .transpose()
            .with_context(|| format!("cannot read `{}`", path.display()))?
            .with_context(|| format!("`{}` ended before the data rows", path.display()))
    };
    let header = next_line()?;
    if header.trim_end() != TRAJECTORY_HEADER {
        bail!(
            "`{}` is not a trajectory file: first line `{}`, expected `{}`",
            path.display(),
            header,
            TRAJECTORY_HEADER
        );
    }
    let schema = next_line()?;
    let expected = trajectory_columns(names);
    if schema.trim_end() != expected {
        bail!(
            "`{}` column schema mismatch:\n  found    {}\n  expected {}",
            path.display(),
            schema,
            expected
        );
    }

    let n_cols = 3 + names.len() + 3;
    let mut dys = Vec::new();
    let mut truth_at_rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.with_context(|| format!("cannot read `{}`", path.display()))?;
        if line.is_empty() {
            continue;
        }
        let row_no = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            bail!(
                "`{}` row {row_no}: {} fields, expected {n_cols}",
                path.display(),
                fields.len()
            );
        }
        let step: usize = fields[0]
            .parse()
            .with_context(|| format!("`{}` row {row_no}: bad step", path.display()))?;
        if step != row_no {
            bail!(
                "`{}` row {row_no} has step {step}: replay needs an undecimated \
                 (decimation = 1) trajectory with contiguous steps",
                path.display()
            );
        }
        let float = |k: usize, what: &str| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .with_context(|| format!("`{}` row {row_no}: bad {what}", path.display()))
        };
        let t = float(1, "t")?;
        if step == 1 {
            let dt = t;
            if (dt - expected_dt).abs() > 1e-12 * expected_dt.abs().max(1.0) {
                bail!(
                    "`{}` was recorded at dt = {dt}, config says dt = {expected_dt}",
                    path.display()
                );
            }
        }
        dys.push(float(2, "dy")?);
        if step % decimation == 0 {
            let mut theta = Vec::with_capacity(names.len());
            for (j, name) in names.iter().enumerate() {
                theta.push(float(3 + j, &format!("theta_true_{name}"))?);
            }
            truth_at_rows.push(theta);
        }
    }
    if dys.is_empty() {
        bail!("`{}` contains no data rows", path.display());
    }
    Ok(ReplayRecord { dys, truth_at_rows })
}

/// Hex SHA-256 of the record's little-endian f64 bytes; lets a replay prove
/// it consumed exactly the stream a simulate run produced.
pub fn dy_digest(dys: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for dy in dys {
        hasher.update(dy.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Per-seed provenance: command, code version, record length and digest, and
/// a full echo of the effective configuration, sufficient to re-run.
#[derive(Serialize)]
pub struct Manifest<'a> {
    pub format: &'static str,
    pub command: &'a str,
    pub code_version: &'static str,
    pub seed: u64,
    /// Length of the measurement record (undecimated).
    pub steps: usize,
    pub dt: f64,
    pub decimation: usize,
    /// Record source: `simulated` or `replay:<path>`.
    pub source: String,
    pub dy_sha256: String,
    pub config: &'a ExperimentConfig,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string_pretty(manifest).context("manifest serialization")?;
    std::fs::write(path, text)
        .with_context(|| format!("cannot write manifest `{}`", path.display()))?;
    Ok(())
}

/// One summary line per (seed, parameter): mean and standard deviation of
/// the natural-coordinate estimate over the tail window, plus `median`
/// aggregate rows across seeds.
pub struct SummaryRow {
    pub seed: String,
    pub param: String,
    pub tail_mean: f64,
    pub tail_std: f64,
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "{SUMMARY_HEADER}")?;
    writeln!(out, "seed,param,tail_mean,tail_std")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.seed,
            r.param,
            fmt_f64(r.tail_mean),
            fmt_f64(r.tail_std)
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Ascent trace for one offline-ml seed: iteration, likelihood, gradient
/// norm and the natural-coordinate estimate.
pub fn write_offline_csv(
    path: &Path,
    names: &[&str],
    iterations: impl Iterator<Item = (usize, f64, f64, Vec<f64>)>,
) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "{OFFLINE_HEADER}")?;
    writeln!(
        out,
        "iteration,loglik,grad_norm,{}",
        param_columns("theta_", names)
    )?;
    for (i, loglik, grad_norm, theta) in iterations {
        let mut line = format!("{i},{},{}", fmt_f64(loglik), fmt_f64(grad_norm));
        for v in theta {
            write!(line, ",{}", fmt_f64(v))?;
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_offline_summary_csv(
    path: &Path,
    rows: &[(String, String, f64)], // seed, param, estimate
) -> Result<()> {
    let mut out = BufWriter::new(create(path)?);
    writeln!(out, "{OFFLINE_SUMMARY_HEADER}")?;
    writeln!(out, "seed,param,estimate")?;
    for (seed, param, estimate) in rows {
        writeln!(out, "{seed},{param},{}", fmt_f64(*estimate))?;
    }
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("cannot create `{}`", path.display()))
}
