//! Batch experiment runner.
//!
//! Verbs:
//!
//! * `run` executes `trials` seeded trials and writes `per_vehicle.csv`,
//!   `summary.csv`, `manifest.txt` and, with `--trace`, `trace.ldr`;
//! * `validate` checks a config and prints the effective values;
//! * `sweep` repeats `run` for each value of one parameter, writing each
//!   run to its own `<param>_<value>/` directory and one summary row per
//!   value to the top-level `summary.csv`.
//!
//! Exit status is 0 on success, 2 for configuration errors and 1 for
//! runtime failures.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use coopnav::scenario::{run_trial, ScenarioConfig, TrialOutcome};
use rayon::prelude::*;

use config::{is_known_key, parse, render, set_key, ConfigError, ParsedConfig, DEVIATION_KEY};
use output::{per_vehicle_csv, summarize, summary_csv, trace_text, write_file, RunManifest, SummaryRow};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "coopnav", version, about = "Cooperative vehicular localization simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run seeded trials and write CSV outputs.
    Run(RunArgs),
    /// Check a config and print the effective values.
    Validate(Overrides),
    /// Run once per value of a swept parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Ranging mode: `full` or `abstract`.
    #[arg(long)]
    pub mode: Option<String>,
    /// GPS error standard deviation on both axes, meters.
    #[arg(long)]
    pub deviation: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct Execution {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write the message trace.
    #[arg(long)]
    pub trace: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub exec: Execution,
}

#[derive(Debug, Args, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub exec: Execution,
    /// Parameter to sweep; defaults to `sweep_param` from the config, then
    /// `gps_deviation`.
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated values; defaults to `sweep_values` from the config,
    /// then 5,10,15.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration")]
    Config(Vec<ConfigError>),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config(vec![ConfigError {
            line: None,
            field: Some(field.into()),
            message: message.into(),
        }])
    }
}

/// A swept parameter with its values, over a base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    pub param: String,
    pub values: Vec<String>,
}

impl SweepSpec {
    pub fn new(base: ScenarioConfig, param: String, values: Vec<String>) -> Result<Self, CliError> {
        if !is_known_key(&param) {
            return Err(CliError::config("--param", format!("`{param}` is not a config key")));
        }
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(CliError::config("--values", "at least one non-empty value required"));
        }
        Ok(Self { base, param, values })
    }

    /// The config for each swept value, validated.
    pub fn configs(&self) -> Result<Vec<ScenarioConfig>, CliError> {
        self.values
            .iter()
            .map(|v| {
                let mut c = self.base.clone();
                set_key(&mut c, &self.param, v)
                    .map_err(|m| CliError::config(&self.param, format!("value `{v}`: {m}")))?;
                check(&c, None)?;
                Ok(c)
            })
            .collect()
    }
}

fn check(config: &ScenarioConfig, parsed: Option<&ParsedConfig>) -> Result<(), CliError> {
    let diagnostics = config.validate();
    if diagnostics.is_empty() {
        return Ok(());
    }
    Err(CliError::Config(match parsed {
        Some(p) => p.locate(&diagnostics),
        None => diagnostics
            .iter()
            .map(|d| ConfigError {
                line: None,
                field: Some(d.field.clone()),
                message: d.message.clone(),
            })
            .collect(),
    }))
}

/// Reads the config file (if any) and applies command-line overrides.
pub fn resolve(overrides: &Overrides) -> Result<ParsedConfig, CliError> {
    let mut parsed = match &overrides.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::config("--config", format!("cannot read {}: {e}", path.display()))
            })?;
            parse(&text).map_err(CliError::Config)?
        }
        None => ParsedConfig::default(),
    };
    let c = &mut parsed.config;
    if let Some(seed) = overrides.seed {
        c.seed = seed;
    }
    if let Some(trials) = overrides.trials {
        c.trials = trials;
    }
    if let Some(mode) = &overrides.mode {
        set_key(c, "ranging_mode", mode).map_err(|m| CliError::config("--mode", m))?;
    }
    if let Some(d) = overrides.deviation {
        set_key(c, DEVIATION_KEY, &d.to_string()).map_err(|m| CliError::config("--deviation", m))?;
    }
    // overridden fields no longer come from a file line
    for (flag, fields) in [
        (overrides.seed.is_some(), &["seed"][..]),
        (overrides.trials.is_some(), &["trials"][..]),
        (overrides.mode.is_some(), &["ranging_mode"][..]),
        (overrides.deviation.is_some(), &["gps_std_x", "gps_std_y"][..]),
    ] {
        if flag {
            for f in fields {
                parsed.lines.remove(*f);
            }
        }
    }
    Ok(parsed)
}

/// Runs every trial of `config` on `workers` threads. Results are ordered
/// by trial index whatever the completion order.
pub fn execute(config: &ScenarioConfig, workers: usize) -> Result<Vec<TrialOutcome>, CliError> {
    if workers == 0 {
        return Err(CliError::config("--workers", "must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| {
        (0..config.trials as u64)
            .into_par_iter()
            .map(|t| run_trial(config, t))
            .collect()
    });
    results
        .into_iter()
        .enumerate()
        .map(|(t, r)| r.map_err(|e| CliError::Runtime(format!("trial {t}: {e}"))))
        .collect()
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes one run's per-vehicle rows (and trace) into `dir`; returns the
/// digest entries with paths prefixed by `prefix`.
fn write_trials(
    dir: &Path,
    prefix: &str,
    outcomes: &[TrialOutcome],
    trace: bool,
) -> Result<Vec<(String, String)>, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut files = vec![write_file(dir, "per_vehicle.csv", &per_vehicle_csv(outcomes))
        .map_err(|e| io_error(dir, e))?];
    if trace {
        files.push(write_file(dir, "trace.ldr", &trace_text(outcomes)).map_err(|e| io_error(dir, e))?);
    }
    Ok(files
        .into_iter()
        .map(|(name, digest)| (format!("{prefix}{name}"), digest))
        .collect())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.render()).map_err(|e| io_error(&path, e))
}

fn report_row(out: &mut dyn Write, label: &str, row: &SummaryRow) {
    let _ = writeln!(
        out,
        "{label}: {} trials, avg GPS error {:.3} m, avg DLEA error {:.3} m, {} convergence failures",
        row.trials, row.avg_gps, row.avg_dlea, row.convergence_failures
    );
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<SummaryRow, CliError> {
    let parsed = resolve(&args.overrides)?;
    let config = parsed.config.clone();
    check(&config, Some(&parsed))?;
    let started = unix_now();
    let outcomes = execute(&config, args.exec.workers)?;
    let dir = &args.exec.out;
    let mut digests = write_trials(dir, "", &outcomes, args.exec.trace)?;
    let row = summarize(&config, &outcomes);
    digests.push(
        write_file(dir, "summary.csv", &summary_csv(&[(None, row.clone())], None))
            .map_err(|e| io_error(dir, e))?,
    );
    write_manifest(
        dir,
        &RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            sweep: None,
            started_unix: started,
            finished_unix: unix_now(),
            digests,
        },
    )?;
    report_row(out, &format!("deviation {}", row.deviation), &row);
    Ok(row)
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> Result<Vec<SummaryRow>, CliError> {
    let parsed = resolve(&args.overrides)?;
    let param = args
        .param
        .clone()
        .or_else(|| parsed.sweep_param.clone())
        .unwrap_or_else(|| DEVIATION_KEY.to_string());
    let values = args
        .values
        .clone()
        .or_else(|| parsed.sweep_values.clone())
        .unwrap_or_else(|| ["5", "10", "15"].map(String::from).to_vec());
    let spec = SweepSpec::new(parsed.config.clone(), param, values)?;
    let configs = spec.configs()?;
    let started = unix_now();
    let dir = &args.exec.out;
    let mut digests = Vec::new();
    let mut rows = Vec::new();
    for (value, config) in spec.values.iter().zip(&configs) {
        let outcomes = execute(config, args.exec.workers)?;
        let sub = format!("{}_{value}", spec.param);
        digests.extend(write_trials(&dir.join(&sub), &format!("{sub}/"), &outcomes, args.exec.trace)?);
        let row = summarize(config, &outcomes);
        report_row(out, &format!("{} = {value}", spec.param), &row);
        rows.push((Some(value.clone()), row));
    }
    let extra = (spec.param != DEVIATION_KEY).then_some(spec.param.as_str());
    digests.push(write_file(dir, "summary.csv", &summary_csv(&rows, extra)).map_err(|e| io_error(dir, e))?);
    write_manifest(
        dir,
        &RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config: spec.base.clone(),
            sweep: Some((spec.param.clone(), spec.values.clone())),
            started_unix: started,
            finished_unix: unix_now(),
            digests,
        },
    )?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Prints the effective config; fails with every diagnostic if invalid.
pub fn cmd_validate(overrides: &Overrides, out: &mut dyn Write) -> Result<(), CliError> {
    let parsed = resolve(overrides)?;
    let _ = write!(out, "{}", render(&parsed.config));
    check(&parsed.config, Some(&parsed))?;
    let _ = writeln!(out, "# valid");
    Ok(())
}

/// Parses `args` (including the program name) and runs the verb. Returns
/// the process exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, out).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(a, out).map(|_| ()),
        Command::Validate(o) => cmd_validate(o, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Config(list) => {
                    for d in list {
                        let _ = writeln!(err, "config error: {d}");
                    }
                }
                CliError::Runtime(m) => {
                    let _ = writeln!(err, "error: {m}");
                }
            }
            e.exit_code()
        }
    }
}
