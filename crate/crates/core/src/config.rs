//! Flat `key=value` configuration: one format serves the on-disk config
//! file and the checkpoint's embedded config block. Serialization is
//! canonical (fixed key order, shortest-roundtrip floats) so identical
//! configs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::train::TrainConfig;

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(map)
}

pub fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

pub fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {value:?}")))
}

pub fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

pub fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| {
                Error::Config(format!("{key}: expected comma-separated integers, got {value:?}"))
            })
        })
        .collect()
}

fn fmt_usize_list(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical `key=value` block for a network configuration.
pub fn net_config_to_kv(cfg: &NetConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "input_resolution={}", cfg.input_resolution);
    let _ = writeln!(s, "pyramid_scales={}", fmt_usize_list(&cfg.pyramid_scales));
    let _ = writeln!(s, "maps_per_scale={}", cfg.maps_per_scale);
    let _ = writeln!(s, "kernel_size={}", cfg.kernel_size);
    let _ = writeln!(s, "sigma={:?}", cfg.sigma);
    let _ = writeln!(s, "mc_samples={}", cfg.mc_samples);
    let _ = writeln!(s, "motion_channels={}", fmt_usize_list(&cfg.motion_channels));
    let _ = writeln!(s, "image_channels={}", fmt_usize_list(&cfg.image_channels));
    let _ = writeln!(s, "decoder_channels={}", fmt_usize_list(&cfg.decoder_channels));
    s
}

/// Applies network keys found in `map` onto `cfg`, removing the keys it
/// consumed; unrecognized keys are left for the caller to inspect.
pub fn apply_net_overrides(cfg: &mut NetConfig, map: &mut BTreeMap<String, String>) -> Result<()> {
    if let Some(v) = map.remove("input_resolution") {
        cfg.input_resolution = parse_usize("input_resolution", &v)?;
    }
    if let Some(v) = map.remove("pyramid_scales") {
        cfg.pyramid_scales = parse_usize_list("pyramid_scales", &v)?;
    }
    if let Some(v) = map.remove("maps_per_scale") {
        cfg.maps_per_scale = parse_usize("maps_per_scale", &v)?;
    }
    if let Some(v) = map.remove("kernel_size") {
        cfg.kernel_size = parse_usize("kernel_size", &v)?;
    }
    if let Some(v) = map.remove("sigma") {
        cfg.sigma = parse_f64("sigma", &v)?;
    }
    if let Some(v) = map.remove("mc_samples") {
        cfg.mc_samples = parse_usize("mc_samples", &v)?;
    }
    if let Some(v) = map.remove("motion_channels") {
        cfg.motion_channels = parse_usize_list("motion_channels", &v)?;
    }
    if let Some(v) = map.remove("image_channels") {
        cfg.image_channels = parse_usize_list("image_channels", &v)?;
    }
    if let Some(v) = map.remove("decoder_channels") {
        cfg.decoder_channels = parse_usize_list("decoder_channels", &v)?;
    }
    Ok(())
}

/// The training configuration in the same key=value form, minus `seed` and
/// `threads` (see [`apply_train_overrides`]).
pub fn train_config_to_kv(cfg: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "batch_size={}", cfg.batch_size);
    let _ = writeln!(s, "steps={}", cfg.steps);
    let _ = writeln!(s, "learning_rate={:?}", cfg.learning_rate);
    let _ = writeln!(s, "checkpoint_every={}", cfg.checkpoint_every);
    let _ = writeln!(s, "kl_anneal_steps={}", cfg.kl_anneal_steps);
    let _ = writeln!(s, "ablation={}", cfg.ablation);
    s
}

/// Applies training keys found in `map` onto `cfg`, removing the keys it
/// consumed. `seed` and `threads` are deliberately absent: they are global
/// command-line concerns, not file-configurable.
pub fn apply_train_overrides(cfg: &mut TrainConfig, map: &mut BTreeMap<String, String>) -> Result<()> {
    if let Some(v) = map.remove("batch_size") {
        cfg.batch_size = parse_usize("batch_size", &v)?;
    }
    if let Some(v) = map.remove("steps") {
        cfg.steps = parse_u64("steps", &v)?;
    }
    if let Some(v) = map.remove("learning_rate") {
        cfg.learning_rate = parse_f64("learning_rate", &v)?;
    }
    if let Some(v) = map.remove("checkpoint_every") {
        cfg.checkpoint_every = parse_u64("checkpoint_every", &v)?;
    }
    if let Some(v) = map.remove("kl_anneal_steps") {
        cfg.kl_anneal_steps = parse_u64("kl_anneal_steps", &v)?;
    }
    if let Some(v) = map.remove("ablation") {
        cfg.ablation = v.parse()?;
    }
    Ok(())
}

/// Parses a complete network config block (checkpoint embedding): defaults
/// plus overrides, rejecting unknown keys.
pub fn net_config_from_kv(text: &str) -> Result<NetConfig> {
    let mut map = parse_kv(text)?;
    let mut cfg = NetConfig::default();
    apply_net_overrides(&mut cfg, &mut map)?;
    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("unknown network config key {key:?}")));
    }
    cfg.validate()?;
    Ok(cfg)
}
