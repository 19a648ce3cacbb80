//! Plain-text run configuration.
//!
//! One `key = value` per line, `#` starts a comment. Every model and
//! training field has a key; anything absent falls back to its default and
//! is reported so runs never silently diverge from what the file says.
//! Unknown and repeated keys are errors. Serialization writes every key in
//! one fixed order, so parse, serialize, parse is a fixed point.

use std::path::PathBuf;

use mvicl_core::diffusion::{TrainConfig, WeightPolicy};
use mvicl_core::model::ModelConfig;
use mvicl_core::sca::AlignMode;
use mvicl_core::sim::camera::{AZIMUTHS_DEG, RING_RADIUS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {content:?}")]
    Syntax { line: usize, content: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} appears twice")]
    DuplicateKey { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?} as {want}")]
    BadValue { key: &'static str, value: String, want: &'static str },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub ring_radius: f64,
    pub azimuths_deg: [f64; 4],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            ring_radius: RING_RADIUS,
            azimuths_deg: AZIMUTHS_DEG,
        }
    }
}

/// Parse result: the config plus which keys fell back to defaults.
#[derive(Debug)]
pub struct Parsed {
    pub config: RunConfig,
    pub defaulted: Vec<&'static str>,
}

const KEYS: [&str; 18] = [
    "model.d_model",
    "model.n_layers",
    "model.n_heads",
    "model.patch_size",
    "model.vocab_size",
    "model.lora_rank",
    "model.image_side",
    "train.iterations",
    "train.learning_rate",
    "train.batch_size",
    "train.cfg_dropout_prob",
    "train.weight",
    "train.sca_weight",
    "train.align_mode",
    "data.dir",
    "rig.radius",
    "rig.azimuths_deg",
    "seed",
];

fn weight_to_string(w: WeightPolicy) -> String {
    match w {
        WeightPolicy::Constant(c) => format!("constant:{c}"),
        WeightPolicy::SigmaSq => "sigma_sq".to_owned(),
    }
}

fn weight_from_string(s: &str) -> Option<WeightPolicy> {
    if s == "sigma_sq" {
        return Some(WeightPolicy::SigmaSq);
    }
    let c = s.strip_prefix("constant:")?;
    c.parse().ok().map(WeightPolicy::Constant)
}

fn align_to_string(a: AlignMode) -> &'static str {
    match a {
        AlignMode::Sca => "sca",
        AlignMode::FullAttn => "full_attn",
        AlignMode::Parameter => "parameter",
    }
}

fn align_from_string(s: &str) -> Option<AlignMode> {
    match s {
        "sca" => Some(AlignMode::Sca),
        "full_attn" => Some(AlignMode::FullAttn),
        "parameter" => Some(AlignMode::Parameter),
        _ => None,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Parsed, ConfigError> {
        let mut seen: Vec<(&'static str, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, content: raw.trim().to_owned() })?;
            let (key, value) = (key.trim(), value.trim());
            let canonical = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_owned() })?;
            if seen.iter().any(|(k, ..)| k == canonical) {
                return Err(ConfigError::DuplicateKey { line, key: key.to_owned() });
            }
            seen.push((canonical, value.to_owned(), line));
        }

        let mut cfg = RunConfig::default();
        for (key, value, _) in &seen {
            let bad = |want: &'static str| ConfigError::BadValue {
                key,
                value: value.clone(),
                want,
            };
            match *key {
                "model.d_model" => cfg.model.d_model = value.parse().map_err(|_| bad("usize"))?,
                "model.n_layers" => cfg.model.n_layers = value.parse().map_err(|_| bad("usize"))?,
                "model.n_heads" => cfg.model.n_heads = value.parse().map_err(|_| bad("usize"))?,
                "model.patch_size" => cfg.model.patch_size = value.parse().map_err(|_| bad("usize"))?,
                "model.vocab_size" => cfg.model.vocab_size = value.parse().map_err(|_| bad("usize"))?,
                "model.lora_rank" => cfg.model.lora_rank = value.parse().map_err(|_| bad("usize"))?,
                "model.image_side" => cfg.model.image_side = value.parse().map_err(|_| bad("usize"))?,
                "train.iterations" => cfg.train.iterations = value.parse().map_err(|_| bad("usize"))?,
                "train.learning_rate" => cfg.train.learning_rate = value.parse().map_err(|_| bad("f32"))?,
                "train.batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("usize"))?,
                "train.cfg_dropout_prob" => cfg.train.cfg_dropout_prob = value.parse().map_err(|_| bad("f32"))?,
                "train.weight" => {
                    cfg.train.weight =
                        weight_from_string(value).ok_or_else(|| bad("constant:<f32> or sigma_sq"))?
                }
                "train.sca_weight" => cfg.train.sca_weight = value.parse().map_err(|_| bad("f32"))?,
                "train.align_mode" => {
                    cfg.train.align_mode =
                        align_from_string(value).ok_or_else(|| bad("sca, full_attn, or parameter"))?
                }
                "data.dir" => cfg.data_dir = PathBuf::from(value),
                "rig.radius" => cfg.ring_radius = value.parse().map_err(|_| bad("f64"))?,
                "rig.azimuths_deg" => {
                    let parts: Vec<f64> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("four comma-separated f64"))?;
                    cfg.azimuths_deg =
                        parts.try_into().map_err(|_| bad("four comma-separated f64"))?;
                }
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad("u64"))?,
                _ => unreachable!("key list is closed"),
            }
        }
        cfg.validate()?;
        let defaulted = KEYS
            .iter()
            .filter(|k| !seen.iter().any(|(s, ..)| s == *k))
            .copied()
            .collect();
        Ok(Parsed { config: cfg, defaulted })
    }

    pub fn serialize(&self) -> String {
        let az = self
            .azimuths_deg
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        for key in KEYS {
            let value = match key {
                "model.d_model" => self.model.d_model.to_string(),
                "model.n_layers" => self.model.n_layers.to_string(),
                "model.n_heads" => self.model.n_heads.to_string(),
                "model.patch_size" => self.model.patch_size.to_string(),
                "model.vocab_size" => self.model.vocab_size.to_string(),
                "model.lora_rank" => self.model.lora_rank.to_string(),
                "model.image_side" => self.model.image_side.to_string(),
                "train.iterations" => self.train.iterations.to_string(),
                "train.learning_rate" => self.train.learning_rate.to_string(),
                "train.batch_size" => self.train.batch_size.to_string(),
                "train.cfg_dropout_prob" => self.train.cfg_dropout_prob.to_string(),
                "train.weight" => weight_to_string(self.train.weight),
                "train.sca_weight" => self.train.sca_weight.to_string(),
                "train.align_mode" => align_to_string(self.train.align_mode).to_owned(),
                "data.dir" => self.data_dir.display().to_string(),
                "rig.radius" => self.ring_radius.to_string(),
                "rig.azimuths_deg" => az.clone(),
                "seed" => self.train.seed.to_string(),
                _ => unreachable!("key list is closed"),
            };
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&value);
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.ring_radius.is_finite() && self.ring_radius > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "rig radius must be finite and positive, got {}",
                self.ring_radius
            )));
        }
        if self.azimuths_deg.iter().any(|a| !a.is_finite()) {
            return Err(ConfigError::Invalid("rig azimuths must be finite".into()));
        }
        Ok(())
    }
}
