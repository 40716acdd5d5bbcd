//! CSV, trace and manifest writers.
//!
//! `per_vehicle.csv`:
//! `trial,vehicle_id,true_x,true_y,fix_x,fix_y,est_x,est_y,gps_err_m,dlea_err_m`
//!
//! `summary.csv`:
//! `deviation,avg_gps_error_m,avg_dlea_error_m,trials,convergence_failures`,
//! preceded by a column named after the swept parameter when a sweep varies
//! something other than the GPS deviation.
//!
//! Floats are written in the shortest form that parses back exactly, so
//! summary averages can be recomputed from the per-vehicle rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use coopnav::scenario::{ScenarioConfig, TrialOutcome};
use sha2::{Digest, Sha256};

use crate::config::render;

pub const PER_VEHICLE_HEADER: &str =
    "trial,vehicle_id,true_x,true_y,fix_x,fix_y,est_x,est_y,gps_err_m,dlea_err_m";
pub const SUMMARY_HEADER: &str =
    "deviation,avg_gps_error_m,avg_dlea_error_m,trials,convergence_failures";

/// One `summary.csv` row. Averages pool every vehicle of every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub deviation: f64,
    pub avg_gps: f64,
    pub avg_dlea: f64,
    pub trials: usize,
    pub convergence_failures: usize,
}

pub fn summarize(config: &ScenarioConfig, outcomes: &[TrialOutcome]) -> SummaryRow {
    let rows = outcomes.iter().flat_map(|t| t.report.per_vehicle.iter());
    let (mut n, mut gps, mut dlea) = (0usize, 0.0, 0.0);
    for v in rows {
        n += 1;
        gps += v.gps_error;
        dlea += v.dlea_error;
    }
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };
    SummaryRow {
        deviation: config.gps_error.stddev.x,
        avg_gps: mean(gps),
        avg_dlea: mean(dlea),
        trials: outcomes.len(),
        convergence_failures: outcomes.iter().map(|t| t.convergence_failures()).sum(),
    }
}

pub fn per_vehicle_csv(outcomes: &[TrialOutcome]) -> String {
    let mut s = String::from(PER_VEHICLE_HEADER);
    s.push('\n');
    for t in outcomes {
        let fixes = &t.inputs.observations.fixes;
        for (v, (id, truth)) in t.report.per_vehicle.iter().zip(t.inputs.snapshot.vehicles()) {
            debug_assert_eq!(v.vehicle_id, *id);
            let fix = fixes[id].position;
            let est = t.protocol.finals[id].position;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                t.trial, id.0, truth.x, truth.y, fix.x, fix.y, est.x, est.y, v.gps_error, v.dlea_error
            )
            .unwrap();
        }
    }
    s
}

/// `summary.csv`; `param` names an extra leading column holding each row's
/// swept value.
pub fn summary_csv(rows: &[(Option<String>, SummaryRow)], param: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(p) = param {
        write!(s, "{p},").unwrap();
    }
    s.push_str(SUMMARY_HEADER);
    s.push('\n');
    for (value, r) in rows {
        if param.is_some() {
            write!(s, "{},", value.as_deref().unwrap_or("")).unwrap();
        }
        writeln!(
            s,
            "{},{},{},{},{}",
            r.deviation, r.avg_gps, r.avg_dlea, r.trials, r.convergence_failures
        )
        .unwrap();
    }
    s
}

/// Message trace, one `round,from,to,kind,digest` record per line, each
/// trial introduced by a `# trial <n>` line.
pub fn trace_text(outcomes: &[TrialOutcome]) -> String {
    let mut s = String::from("# round,from,to,kind,digest\n");
    for t in outcomes {
        writeln!(s, "# trial {}", t.trial).unwrap();
        for r in &t.protocol.trace {
            writeln!(s, "{r}").unwrap();
        }
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `contents` to `dir/name` and returns its digest entry.
pub fn write_file(dir: &Path, name: &str, contents: &str) -> std::io::Result<(String, String)> {
    fs::write(dir.join(name), contents)?;
    Ok((name.to_string(), sha256_hex(contents.as_bytes())))
}

/// Run metadata. Everything except the timestamps is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub config: ScenarioConfig,
    pub sweep: Option<(String, Vec<String>)>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// `(relative path, sha256)` of every emitted file.
    pub digests: Vec<(String, String)>,
}

impl RunManifest {
    /// `key = value` lines; the config appears under a `config.` prefix in
    /// the same form as a config file.
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "version = {}", self.version).unwrap();
        writeln!(s, "seed = {}", self.config.seed).unwrap();
        writeln!(s, "started_unix = {}", self.started_unix).unwrap();
        writeln!(s, "finished_unix = {}", self.finished_unix).unwrap();
        if let Some((param, values)) = &self.sweep {
            writeln!(s, "sweep_param = {param}").unwrap();
            writeln!(s, "sweep_values = {}", values.join(",")).unwrap();
        }
        for line in render(&self.config).lines() {
            writeln!(s, "config.{line}").unwrap();
        }
        for (path, digest) in &self.digests {
            writeln!(s, "sha256.{path} = {digest}").unwrap();
        }
        s
    }
}

/// The `config.` lines of a rendered manifest, as a config file.
pub fn manifest_config(manifest: &str) -> String {
    manifest
        .lines()
        .filter_map(|l| l.strip_prefix("config."))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// `(path, digest)` pairs listed in a rendered manifest.
pub fn manifest_digests(manifest: &str) -> Vec<(String, String)> {
    manifest
        .lines()
        .filter_map(|l| l.strip_prefix("sha256."))
        .filter_map(|l| l.split_once(" = "))
        .map(|(p, d)| (p.to_string(), d.to_string()))
        .collect()
}
