//! Plain-text run configuration: `key = value` lines with dotted keys
//! mirroring the optimizer settings (`run.*`) and loss weights (`loss.*`).
//!
//! `#` starts a full-line comment; blank lines are ignored; later
//! assignments override earlier ones. The same format serves as the
//! resolved-config snapshot written next to every run (dotted key =
//! number is also valid TOML, so the snapshot reads naturally in either
//! world and feeds back into [`parse_config`] unchanged).

use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::optim::RunConfig;

/// Everything a config file can set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub loss: LossWeights,
}

fn config_error(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_usize(value: &str, key: &str, line: usize) -> Result<usize> {
    value
        .parse()
        .map_err(|_| config_error(line, format!("{key} expects a non-negative integer, got `{value}`")))
}

fn parse_u64(value: &str, key: &str, line: usize) -> Result<u64> {
    value
        .parse()
        .map_err(|_| config_error(line, format!("{key} expects a non-negative integer, got `{value}`")))
}

fn parse_f64(value: &str, key: &str, line: usize) -> Result<f64> {
    value
        .parse()
        .map_err(|_| config_error(line, format!("{key} expects a number, got `{value}`")))
}

fn apply(settings: &mut Settings, key: &str, value: &str, line: usize) -> Result<()> {
    match key {
        "run.total_iters" => settings.run.total_iters = parse_usize(value, key, line)?,
        "run.gd_block" => settings.run.gd_block = parse_usize(value, key, line)?,
        "run.sa_candidates" => settings.run.sa_candidates = parse_usize(value, key, line)?,
        "run.sa_sigma_scale" => settings.run.sa_sigma_scale = parse_f64(value, key, line)?,
        "run.lr" => settings.run.lr = parse_f64(value, key, line)?,
        "run.hybrid_fraction" => settings.run.hybrid_fraction = parse_f64(value, key, line)?,
        "run.trajectories" => settings.run.trajectories = parse_usize(value, key, line)?,
        "run.trajectory_len" => settings.run.trajectory_len = parse_usize(value, key, line)?,
        "run.warmup" => settings.run.warmup = parse_usize(value, key, line)?,
        "run.canvas_side" => settings.run.canvas_side = parse_usize(value, key, line)?,
        "run.supersample" => settings.run.supersample = parse_usize(value, key, line)?,
        "run.map_count" => settings.run.map_count = parse_usize(value, key, line)?,
        "run.seed" => settings.run.seed = parse_u64(value, key, line)?,
        "loss.mse" => settings.loss.mse = parse_f64(value, key, line)?,
        "loss.ssim" => settings.loss.ssim = parse_f64(value, key, line)?,
        "loss.lpips" => settings.loss.lpips = parse_f64(value, key, line)?,
        "loss.reg" => settings.loss.reg = parse_f64(value, key, line)?,
        "loss.cond" => settings.loss.cond = parse_f64(value, key, line)?,
        _ => return Err(config_error(line, format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parses config text on top of the defaults.
pub fn parse_config(text: &str) -> Result<Settings> {
    parse_config_into(text, Settings::default())
}

/// Parses config text on top of an existing settings value (so a file can
/// refine CLI- or code-supplied bases).
pub fn parse_config_into(text: &str, mut settings: Settings) -> Result<Settings> {
    for (index, raw_line) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_error(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(config_error(line_no, "empty key"));
        }
        if value.is_empty() {
            return Err(config_error(line_no, format!("key `{key}` has no value")));
        }
        apply(&mut settings, key, value, line_no)?;
    }
    Ok(settings)
}

/// Reads and parses a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<Settings> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Serializes fully resolved settings as the reproducibility snapshot.
/// Every field appears exactly once; the output round-trips through
/// [`parse_config`] bit-for-bit (shortest-roundtrip float formatting).
pub fn resolved_snapshot(settings: &Settings) -> String {
    let r = &settings.run;
    let l = &settings.loss;
    format!(
        "# resolved run configuration\n\
         run.total_iters = {}\n\
         run.gd_block = {}\n\
         run.sa_candidates = {}\n\
         run.sa_sigma_scale = {}\n\
         run.lr = {}\n\
         run.hybrid_fraction = {}\n\
         run.trajectories = {}\n\
         run.trajectory_len = {}\n\
         run.warmup = {}\n\
         run.canvas_side = {}\n\
         run.supersample = {}\n\
         run.map_count = {}\n\
         run.seed = {}\n\
         loss.mse = {}\n\
         loss.ssim = {}\n\
         loss.lpips = {}\n\
         loss.reg = {}\n\
         loss.cond = {}\n",
        r.total_iters,
        r.gd_block,
        r.sa_candidates,
        r.sa_sigma_scale,
        r.lr,
        r.hybrid_fraction,
        r.trajectories,
        r.trajectory_len,
        r.warmup,
        r.canvas_side,
        r.supersample,
        r.map_count,
        r.seed,
        l.mse,
        l.ssim,
        l.lpips,
        l.reg,
        l.cond,
    )
}
