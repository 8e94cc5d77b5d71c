//! Run configuration: TOML files with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::BackendKind;
use crate::error::{Error, Result};
use crate::matching::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub queries: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    /// Side of the square input images.
    pub image_size: usize,
    /// Sinusoidal word positions in the text encoder.
    pub text_positional: bool,
    /// Train in double precision.
    pub float64: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, queries: 5, heads: 4, decoder_layers: 9, image_size: 64, text_positional: false, float64: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls: f64,
    pub mask: f64,
    pub mcc: f64,
    pub temperature: f64,
    pub deep_supervision: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { cls: 2.0, mask: 5.0, mcc: 2.0, temperature: 1.0, deep_supervision: true }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { cls: self.cls, mask: self.mask, mcc: self.mcc }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rates drop by `decay_factor` from iteration
    /// `ceil(decay_at * iterations)` on.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Global gradient-norm clip; zero disables it.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            backbone_lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Scenes per batch; each contributes a triplet of expressions.
    pub batch_scenes: usize,
    /// Validation interval in iterations; zero validates only at the end.
    pub val_every: usize,
    /// Cap on validation samples; zero uses all of them.
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 5000, batch_scenes: 8, val_every: 1000, val_samples: 0 }
    }
}

/// Which of the three model components are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub clip_prior: bool,
    pub cmd: bool,
    pub mcc: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const FULL: Self = Self { clip_prior: true, cmd: true, mcc: true };
    pub const BASELINE: Self = Self { clip_prior: false, cmd: false, mcc: false };

    pub fn label(&self) -> String {
        match (self.clip_prior, self.cmd, self.mcc) {
            (false, false, false) => "baseline".into(),
            (true, true, true) => "full".into(),
            _ => {
                let mut parts = Vec::new();
                if self.clip_prior {
                    parts.push("prior");
                }
                if self.cmd {
                    parts.push("cmd");
                }
                if self.mcc {
                    parts.push("mcc");
                }
                parts.join("+")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub backend: BackendKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: PathBuf::from("data/train"), val: PathBuf::from("data/val"), backend: BackendKind::Mock }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults sized for a single CPU.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Widths, batch size and optimizer settings of the full-size recipe.
    pub fn large() -> Self {
        let mut c = Self::default();
        c.model.dim = 256;
        c.model.heads = 8;
        c.train.batch_scenes = 24;
        c.train.iterations = 100_000;
        c.optim.lr = 1e-4;
        c.optim.backbone_lr = 1e-5;
        c.optim.weight_decay = 0.05;
        c.optim.grad_clip = 0.0;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "large" => Ok(Self::large()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or large)"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_literal(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, sections) = parts.split_last().expect("split yields at least one part");
            let mut table = root.as_table_mut().expect("config serializes to a table");
            for part in sections {
                table = table
                    .get_mut(*part)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown section {part} in {key}")))?;
            }
            match table.get(*last) {
                Some(old) if !old.is_table() => {
                    let value = coerce(old, value)
                        .ok_or_else(|| Error::Config(format!("{key}: cannot use {raw:?} here")))?;
                    table.insert(last.to_string(), value);
                }
                _ => return Err(Error::Config(format!("unknown setting {key}"))),
            }
        }
        let c: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dim == 0 || m.queries == 0 || m.heads == 0 || m.decoder_layers == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if m.image_size == 0 || m.image_size % 32 != 0 {
            return Err(Error::Config(format!("image size {} is not a multiple of 32", m.image_size)));
        }
        if m.dim % m.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", m.heads, m.dim)));
        }
        let l = &self.loss;
        if [l.cls, l.mask, l.mcc].iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(l.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !(o.backbone_lr >= 0.0) || !(o.eps > 0.0) {
            return Err(Error::Config("learning rates and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&o.decay_at) || !(o.decay_factor > 0.0) || !(o.grad_clip >= 0.0) {
            return Err(Error::Config("invalid learning-rate schedule".into()));
        }
        if self.train.batch_scenes == 0 {
            return Err(Error::Config("batch_scenes must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn coerce(old: &toml::Value, new: toml::Value) -> Option<toml::Value> {
    use toml::Value::*;
    match (old, new) {
        (Float(_), Integer(i)) => Some(Float(i as f64)),
        (String(_), v @ (Integer(_) | Float(_) | Boolean(_))) => Some(String(v.to_string())),
        (a, b) if std::mem::discriminant(a) == std::mem::discriminant(&b) => Some(b),
        _ => None,
    }
}
