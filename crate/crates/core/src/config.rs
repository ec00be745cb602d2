//! Line-based `key = value` configuration files. `#` starts a comment;
//! unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{AblationRow, ExperimentConfig, LrSchedule};
use crate::net::ConvKind;
use crate::sslconv::OffsetMode;
use crate::topo::ConnectivityRule;

pub const KEYS: &[&str] = &[
    "levels",
    "base_channels",
    "conv_kind",
    "offset_mode",
    "strip_length",
    "use_cl",
    "use_nc",
    "skeleton_iterations",
    "weight_mask",
    "weight_cl",
    "weight_con",
    "connectivity_rule",
    "optimizer",
    "learning_rate",
    "lr_schedule",
    "batch_size",
    "epochs",
    "seed",
    "image_size",
    "depth",
    "root_width",
    "width_decay",
    "angle_jitter",
    "vessel_intensity",
    "background_intensity",
    "contrast_jitter",
    "noise_sigma",
    "blur",
    "train_count",
    "val_count",
    "test_count",
    "threshold",
    "ablation_rows",
];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn rule_name(r: ConnectivityRule) -> &'static str {
    match r {
        ConnectivityRule::ForegroundPair => "foreground_pair",
        ConnectivityRule::ValueEquality => "value_equality",
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    parse_bool(v).ok_or_else(|| format!("`{v}` is not a boolean"))
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let net = &mut cfg.net;
    let syn = &mut cfg.synth;
    match key {
        "levels" => net.levels = num(v)?,
        "base_channels" => net.base_channels = num(v)?,
        "conv_kind" => net.conv_kind = v.parse::<ConvKind>()?,
        "offset_mode" => net.offset_mode = v.parse::<OffsetMode>()?,
        "strip_length" => net.strip_length = num(v)?,
        "use_cl" => net.loss.use_cl = flag(v)?,
        "use_nc" => net.loss.use_nc = flag(v)?,
        "skeleton_iterations" => net.loss.skeleton_iterations = num(v)?,
        "weight_mask" => net.loss.weights.mask = num(v)?,
        "weight_cl" => net.loss.weights.centerline = num(v)?,
        "weight_con" => net.loss.weights.connectivity = num(v)?,
        "connectivity_rule" => {
            net.connectivity_rule = match v {
                "foreground_pair" => ConnectivityRule::ForegroundPair,
                "value_equality" => ConnectivityRule::ValueEquality,
                _ => return Err(format!("unknown connectivity_rule `{v}` (foreground_pair, value_equality)")),
            }
        }
        "optimizer" => {
            if v != "adam" {
                return Err(format!("unknown optimizer `{v}` (adam)"));
            }
        }
        "learning_rate" => net.learning_rate = num(v)?,
        "lr_schedule" => {
            cfg.lr_schedule = LrSchedule::parse(v).ok_or_else(|| format!("unknown lr_schedule `{v}` (constant, poly)"))?
        }
        "batch_size" => net.batch_size = num(v)?,
        "epochs" => net.epochs = num(v)?,
        "seed" => net.seed = num(v)?,
        "image_size" => syn.size = num(v)?,
        "depth" => syn.depth = num(v)?,
        "root_width" => syn.root_width = num(v)?,
        "width_decay" => syn.width_decay = num(v)?,
        "angle_jitter" => syn.angle_jitter = num(v)?,
        "vessel_intensity" => syn.vessel_intensity = num(v)?,
        "background_intensity" => syn.background_intensity = num(v)?,
        "contrast_jitter" => syn.contrast_jitter = num(v)?,
        "noise_sigma" => syn.noise_sigma = num(v)?,
        "blur" => syn.blur = flag(v)?,
        "train_count" => cfg.splits.train = num(v)?,
        "val_count" => cfg.splits.val = num(v)?,
        "test_count" => cfg.splits.test = num(v)?,
        "threshold" => cfg.threshold = num(v)?,
        "ablation_rows" => {
            cfg.ablation_rows = v
                .split(',')
                .map(|s| AblationRow::parse(s).ok_or_else(|| format!("bad ablation row `{}`", s.trim())))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if cfg.ablation_rows.is_empty() {
                return Err("ablation_rows is empty".to_string());
            }
        }
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

/// Applies the settings in `text` on top of the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Config { line: n + 1, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(format!("key `{key}` appears twice")));
        }
        apply(&mut cfg, key, value).map_err(err)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Every key with its current value; [`parse_config`] reads it back
/// unchanged.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let net = &cfg.net;
    let syn = &cfg.synth;
    let rows: Vec<&str> = cfg.ablation_rows.iter().map(|r| r.name.as_str()).collect();
    let pairs: Vec<(&str, String)> = vec![
        ("levels", net.levels.to_string()),
        ("base_channels", net.base_channels.to_string()),
        ("conv_kind", net.conv_kind.to_string()),
        ("offset_mode", net.offset_mode.name().to_string()),
        ("strip_length", net.strip_length.to_string()),
        ("use_cl", net.loss.use_cl.to_string()),
        ("use_nc", net.loss.use_nc.to_string()),
        ("skeleton_iterations", net.loss.skeleton_iterations.to_string()),
        ("weight_mask", net.loss.weights.mask.to_string()),
        ("weight_cl", net.loss.weights.centerline.to_string()),
        ("weight_con", net.loss.weights.connectivity.to_string()),
        ("connectivity_rule", rule_name(net.connectivity_rule).to_string()),
        ("optimizer", "adam".to_string()),
        ("learning_rate", net.learning_rate.to_string()),
        ("lr_schedule", cfg.lr_schedule.name().to_string()),
        ("batch_size", net.batch_size.to_string()),
        ("epochs", net.epochs.to_string()),
        ("seed", net.seed.to_string()),
        ("image_size", syn.size.to_string()),
        ("depth", syn.depth.to_string()),
        ("root_width", syn.root_width.to_string()),
        ("width_decay", syn.width_decay.to_string()),
        ("angle_jitter", syn.angle_jitter.to_string()),
        ("vessel_intensity", syn.vessel_intensity.to_string()),
        ("background_intensity", syn.background_intensity.to_string()),
        ("contrast_jitter", syn.contrast_jitter.to_string()),
        ("noise_sigma", syn.noise_sigma.to_string()),
        ("blur", syn.blur.to_string()),
        ("train_count", cfg.splits.train.to_string()),
        ("val_count", cfg.splits.val.to_string()),
        ("test_count", cfg.splits.test.to_string()),
        ("threshold", cfg.threshold.to_string()),
        ("ablation_rows", rows.join(",")),
    ];
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
