//! Flat `key = value` configuration files.
//!
//! Keys mirror the fields of [`ScenarioConfig`]. The GPS error model is
//! spread over `gps_mean_x`, `gps_mean_y`, `gps_std_x` and `gps_std_y`;
//! `gps_deviation` sets both standard deviations at once. `#` starts a
//! comment, blank lines are ignored, and each key may appear once.

use std::collections::BTreeMap;
use std::fmt;

use coopnav::scenario::{Diagnostic, ScenarioConfig};
use coopnav::Vec2;

/// Keys written by [`render`], in output order.
pub const KEYS: &[&str] = &[
    "road_length",
    "road_width",
    "lanes",
    "lane_width",
    "comm_range",
    "arrival_rate",
    "mean_velocity",
    "gps_mean_x",
    "gps_mean_y",
    "gps_std_x",
    "gps_std_y",
    "distance_error_std",
    "ranging_mode",
    "satellites",
    "elevation_min_deg",
    "elevation_max_deg",
    "clock_bias_std",
    "common_noise_std",
    "cnr_horizon",
    "cnr_zenith",
    "weight_mode",
    "seed",
    "trials",
];

/// Shorthand key accepted on input and as a sweep parameter.
pub const DEVIATION_KEY: &str = "gps_deviation";

const SWEEP_PARAM: &str = "sweep_param";
const SWEEP_VALUES: &str = "sweep_values";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// A parsed file: the effective config plus where each field was set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedConfig {
    pub config: ScenarioConfig,
    /// Field name → 1-based line that set it.
    pub lines: BTreeMap<String, usize>,
    pub sweep_param: Option<String>,
    pub sweep_values: Option<Vec<String>>,
}

impl ParsedConfig {
    /// Attaches line numbers to validation diagnostics.
    pub fn locate(&self, diagnostics: &[Diagnostic]) -> Vec<ConfigError> {
        diagnostics
            .iter()
            .map(|d| ConfigError {
                line: self.lines.get(&d.field).copied(),
                field: Some(d.field.clone()),
                message: d.message.clone(),
            })
            .collect()
    }
}

fn number(value: &str) -> Result<f64, String> {
    let v: f64 = value
        .parse()
        .map_err(|_| format!("expected a number, got `{value}`"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got `{value}`"))
    }
}

fn integer<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("expected a non-negative integer, got `{value}`"))
}

/// Sets one key. Returns the config fields it touched.
pub fn set_key(
    config: &mut ScenarioConfig,
    key: &str,
    value: &str,
) -> Result<&'static [&'static str], String> {
    let c = config;
    match key {
        "road_length" => c.road_length = number(value)?,
        "road_width" => c.road_width = number(value)?,
        "lanes" => c.lanes = integer(value)?,
        "lane_width" => c.lane_width = number(value)?,
        "comm_range" => c.comm_range = number(value)?,
        "arrival_rate" => c.arrival_rate = number(value)?,
        "mean_velocity" => c.mean_velocity = number(value)?,
        "gps_mean_x" => c.gps_error.mean.x = number(value)?,
        "gps_mean_y" => c.gps_error.mean.y = number(value)?,
        "gps_std_x" => c.gps_error.stddev.x = number(value)?,
        "gps_std_y" => c.gps_error.stddev.y = number(value)?,
        DEVIATION_KEY => {
            let v = number(value)?;
            c.gps_error.stddev = Vec2::new(v, v);
            return Ok(&["gps_std_x", "gps_std_y"]);
        }
        "distance_error_std" => c.distance_error_std = number(value)?,
        "ranging_mode" => c.ranging_mode = value.parse().map_err(|e: coopnav::Error| e.to_string())?,
        "satellites" => c.satellites = integer(value)?,
        "elevation_min_deg" => c.elevation_min_deg = number(value)?,
        "elevation_max_deg" => c.elevation_max_deg = number(value)?,
        "clock_bias_std" => c.clock_bias_std = number(value)?,
        "common_noise_std" => c.common_noise_std = number(value)?,
        "cnr_horizon" => c.cnr_horizon = number(value)?,
        "cnr_zenith" => c.cnr_zenith = number(value)?,
        "weight_mode" => c.weight_mode = value.parse().map_err(|e: coopnav::Error| e.to_string())?,
        "seed" => c.seed = integer(value)?,
        "trials" => c.trials = integer(value)?,
        _ => return Err("unknown key".into()),
    }
    let k = KEYS.iter().find(|k| **k == key).expect("key handled above");
    Ok(std::slice::from_ref(k))
}

/// True for keys that [`set_key`] accepts.
pub fn is_known_key(key: &str) -> bool {
    key == DEVIATION_KEY || KEYS.contains(&key)
}

fn get_key(c: &ScenarioConfig, key: &str) -> String {
    match key {
        "road_length" => c.road_length.to_string(),
        "road_width" => c.road_width.to_string(),
        "lanes" => c.lanes.to_string(),
        "lane_width" => c.lane_width.to_string(),
        "comm_range" => c.comm_range.to_string(),
        "arrival_rate" => c.arrival_rate.to_string(),
        "mean_velocity" => c.mean_velocity.to_string(),
        "gps_mean_x" => c.gps_error.mean.x.to_string(),
        "gps_mean_y" => c.gps_error.mean.y.to_string(),
        "gps_std_x" => c.gps_error.stddev.x.to_string(),
        "gps_std_y" => c.gps_error.stddev.y.to_string(),
        "distance_error_std" => c.distance_error_std.to_string(),
        "ranging_mode" => c.ranging_mode.as_str().to_string(),
        "satellites" => c.satellites.to_string(),
        "elevation_min_deg" => c.elevation_min_deg.to_string(),
        "elevation_max_deg" => c.elevation_max_deg.to_string(),
        "clock_bias_std" => c.clock_bias_std.to_string(),
        "common_noise_std" => c.common_noise_std.to_string(),
        "cnr_horizon" => c.cnr_horizon.to_string(),
        "cnr_zenith" => c.cnr_zenith.to_string(),
        "weight_mode" => c.weight_mode.as_str().to_string(),
        "seed" => c.seed.to_string(),
        "trials" => c.trials.to_string(),
        _ => unreachable!("not a config key: {key}"),
    }
}

/// Every key with its value, one `key = value` per line. Floats use the
/// shortest representation that parses back to the same value.
pub fn render(config: &ScenarioConfig) -> String {
    KEYS.iter()
        .map(|k| format!("{k} = {}\n", get_key(config, k)))
        .collect()
}

/// Parses a config file on top of the defaults. Collects every syntax and
/// value error rather than stopping at the first.
pub fn parse(text: &str) -> Result<ParsedConfig, Vec<ConfigError>> {
    let mut parsed = ParsedConfig::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            errors.push(ConfigError {
                line: Some(line),
                field: None,
                message: format!("expected `key = value`, got `{content}`"),
            });
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        let err = |message: String| ConfigError {
            line: Some(line),
            field: Some(key.to_string()),
            message,
        };
        if let Some(first) = seen.insert(key.to_string(), line) {
            errors.push(err(format!("duplicate key, first set on line {first}")));
            continue;
        }
        match key {
            SWEEP_PARAM => parsed.sweep_param = Some(value.to_string()),
            SWEEP_VALUES => {
                parsed.sweep_values =
                    Some(value.split(',').map(|v| v.trim().to_string()).collect())
            }
            _ => match set_key(&mut parsed.config, key, value) {
                Ok(fields) => {
                    for f in fields {
                        parsed.lines.insert(f.to_string(), line);
                    }
                }
                Err(message) => errors.push(err(message)),
            },
        }
    }
    if seen.contains_key(DEVIATION_KEY) {
        for axis in ["gps_std_x", "gps_std_y"] {
            if let Some(line) = seen.get(axis) {
                errors.push(ConfigError {
                    line: Some(*line),
                    field: Some(axis.into()),
                    message: format!("conflicts with `{DEVIATION_KEY}`"),
                });
            }
        }
    }
    if errors.is_empty() {
        Ok(parsed)
    } else {
        Err(errors)
    }
}
