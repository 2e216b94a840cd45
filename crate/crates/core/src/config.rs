//! `key = value` experiment configuration files.
//!
//! ```text
//! # Scenario 2 intensity sweep
//! scenario = S2
//! I_w = 1..8
//! filters = pf:3000, tl-pf:3000
//! seed = 7
//! ```
//!
//! `scenario` selects the defaults; every other key overrides one field.

use std::path::Path;

use crate::error::{FilterError, Result};
use crate::harness::{parse_filter_list, InitMode, Scenario, ScenarioConfig};
use crate::math::{Matrix, Vector};

/// Keys accepted in a configuration file, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "scenario",
    "K",
    "T_s",
    "q1",
    "q2",
    "sigma_r",
    "sigma_zeta",
    "I_star",
    "I_w",
    "x0",
    "P0",
    "filters",
    "mc",
    "seed",
    "packet_noise_mode",
    "ukf_kappa",
    "truth_init",
    "truth_process_noise",
    "filter_init",
];

fn invalid(line: usize, msg: impl std::fmt::Display) -> FilterError {
    if line == 0 {
        FilterError::InvalidConfig(msg.to_string())
    } else {
        FilterError::InvalidConfig(format!("line {line}: {msg}"))
    }
}

fn parse_f64(v: &str, key: &str, line: usize) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| invalid(line, format_args!("{key}: '{v}' is not a number")))
}

fn parse_list(v: &str, key: &str, line: usize) -> Result<Vec<f64>> {
    v.split(',').map(|t| parse_f64(t, key, line)).collect()
}

/// Parses `4`, `1,2,4,8` or the inclusive integer range `1..8`.
pub fn parse_intensity_list(v: &str) -> Result<Vec<f64>> {
    parse_intensities(v, 0)
}

fn parse_intensities(v: &str, line: usize) -> Result<Vec<f64>> {
    let list = if let Some((a, b)) = v.split_once("..") {
        let a: i64 = a
            .trim()
            .parse()
            .map_err(|_| invalid(line, format_args!("I_w: bad range start '{a}'")))?;
        let b: i64 = b
            .trim()
            .parse()
            .map_err(|_| invalid(line, format_args!("I_w: bad range end '{b}'")))?;
        if b < a {
            return Err(invalid(line, format_args!("I_w: empty range {a}..{b}")));
        }
        (a..=b).map(|i| i as f64).collect()
    } else {
        parse_list(v, "I_w", line)?
    };
    if let Some(i) = list.iter().find(|i| !(**i > 0.0 && i.is_finite())) {
        return Err(invalid(line, format_args!("I_w must be positive, got {i}")));
    }
    Ok(list)
}

fn parse_bool(v: &str, key: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(line, format_args!("{key}: expected true or false, got '{v}'"))),
    }
}

/// Applies one `key = value` override.
pub fn apply_override(cfg: &mut ScenarioConfig, key: &str, value: &str) -> Result<()> {
    apply(cfg, key, value, 0)
}

fn apply(cfg: &mut ScenarioConfig, key: &str, v: &str, line: usize) -> Result<()> {
    let v = v.trim();
    match key {
        "scenario" => {
            let s: Scenario = v.parse()?;
            if s != cfg.scenario {
                return Err(invalid(line, "scenario can only be set once"));
            }
        }
        "K" => {
            cfg.steps = v
                .parse()
                .map_err(|_| invalid(line, format_args!("K: '{v}' is not a count")))?
        }
        "T_s" => cfg.dt = parse_f64(v, key, line)?,
        "q" | "q1" => cfg.q1 = parse_f64(v, key, line)?,
        "q2" => cfg.q2 = parse_f64(v, key, line)?,
        "sigma_r" => cfg.sigma_r = parse_f64(v, key, line)?,
        "sigma_zeta" => cfg.sigma_zeta = parse_f64(v, key, line)?,
        "I_star" => {
            let i = parse_f64(v, key, line)?;
            if !(i > 0.0) {
                return Err(invalid(line, format_args!("I_star must be positive, got {i}")));
            }
            cfg.i_source = i;
        }
        "I_w" => cfg.i_primary = parse_intensities(v, line)?,
        "x0" => cfg.x0 = Vector::from_vec(parse_list(v, key, line)?),
        "P0" => cfg.p0 = Matrix::from_diagonal(&Vector::from_vec(parse_list(v, key, line)?)),
        "filters" => cfg.filters = parse_filter_list(v)?,
        "mc" => {
            cfg.mc = v
                .parse()
                .map_err(|_| invalid(line, format_args!("mc: '{v}' is not a count")))?
        }
        "seed" => {
            cfg.master_seed = Some(
                v.parse()
                    .map_err(|_| invalid(line, format_args!("seed: '{v}' is not an unsigned integer")))?,
            )
        }
        "packet_noise_mode" => cfg.packet_noise_mode = v.parse()?,
        "ukf_kappa" => cfg.ukf_kappa = parse_f64(v, key, line)?,
        "truth_init" => cfg.truth_init = v.parse()?,
        "truth_process_noise" => cfg.truth_process_noise = parse_bool(v, key, line)?,
        "filter_init" => cfg.filter_init = v.parse::<InitMode>()?,
        _ => return Err(invalid(line, format_args!("unknown key '{key}'"))),
    }
    Ok(())
}

/// Parses configuration text. The scenario defaults to S1 when not given.
/// The result is not validated, so a seed may still be supplied later.
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(i + 1, format_args!("expected 'key = value', got '{line}'")))?;
        pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    let scenario = match pairs.iter().filter(|(_, k, _)| k == "scenario").collect::<Vec<_>>()[..] {
        [] => Scenario::S1,
        [(line, _, v)] => v.parse().map_err(|e: FilterError| invalid(*line, e))?,
        _ => return Err(FilterError::InvalidConfig("scenario given more than once".into())),
    };
    let mut cfg = ScenarioConfig::defaults(scenario);
    for (line, k, v) in &pairs {
        apply(&mut cfg, k, v, *line)?;
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| FilterError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

fn join(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Config text that parses back to `cfg` exactly (floats use round-trip formatting).
pub fn to_config_text(cfg: &ScenarioConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("scenario", cfg.scenario.to_string());
    put("K", cfg.steps.to_string());
    put("T_s", cfg.dt.to_string());
    put("q1", cfg.q1.to_string());
    put("q2", cfg.q2.to_string());
    put("sigma_r", cfg.sigma_r.to_string());
    put("sigma_zeta", cfg.sigma_zeta.to_string());
    put("I_star", cfg.i_source.to_string());
    put("I_w", join(cfg.i_primary.iter().copied()));
    put("x0", join(cfg.x0.iter().copied()));
    put("P0", join(cfg.p0.diagonal().iter().copied()));
    put(
        "filters",
        cfg.filters.iter().map(|f| f.id()).collect::<Vec<_>>().join(", "),
    );
    put("mc", cfg.mc.to_string());
    if let Some(s) = cfg.master_seed {
        put("seed", s.to_string());
    }
    put("packet_noise_mode", cfg.packet_noise_mode.to_string());
    put("ukf_kappa", cfg.ukf_kappa.to_string());
    put("truth_init", cfg.truth_init.to_string());
    put("truth_process_noise", cfg.truth_process_noise.to_string());
    put("filter_init", cfg.filter_init.to_string());
    out
}
