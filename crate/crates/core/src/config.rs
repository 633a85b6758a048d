//! Layered run configuration.
//!
//! Defaults, then each TOML file in order, then `section.key=value`
//! overrides; later layers win key by key. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitRatios;
use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::losses::LossWeights;
use crate::network::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Charbonnier only.
    #[default]
    Pix,
    /// Reconstruction, contextual and fidelity terms.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub charbonnier_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            mode: LossMode::default(),
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            charbonnier_eps: w.charbonnier_eps,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            charbonnier_eps: self.charbonnier_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// 1 (supervised) or 2 (self-supervised fine-tuning).
    pub stage: u8,
    pub steps: usize,
    /// Clips per optimizer step.
    pub batch: usize,
    /// Side of the square LR crop; 0 trains on whole frames.
    pub patch_crop: usize,
    /// Frames per training window.
    pub clip_len: usize,
    pub lr: f64,
    /// Learning rate reached at the last step of the cosine schedule.
    pub lr_min: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps (0: never).
    pub checkpoint_every: usize,
    /// Validate every this many steps (0: only at the end).
    pub val_every: usize,
    /// Number of validation clips used during training.
    pub val_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            steps: 1000,
            batch: 1,
            patch_crop: 32,
            clip_len: 3,
            lr: 1e-4,
            lr_min: 1e-6,
            grad_clip: 10.0,
            seed: 0,
            checkpoint_every: 0,
            val_every: 100,
            val_clips: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !matches!(self.stage, 1 | 2) {
            return bad("train.stage must be 1 or 2");
        }
        if self.batch == 0 || self.clip_len == 0 {
            return bad("train.batch and train.clip_len must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("train.lr must be positive and train.lr_min in [0, lr]");
        }
        if self.patch_crop != 0 && self.patch_crop < crate::data::MIN_FRAME_SIDE {
            return Err(Error::Config(format!(
                "train.patch_crop must be 0 or at least {}",
                crate::data::MIN_FRAME_SIDE
            )));
        }
        if !(self.grad_clip > 0.0) {
            return bad("train.grad_clip must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest, relative to the working directory.
    pub manifest: PathBuf,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        DataConfig {
            manifest: PathBuf::from("data/manifest.tsv"),
            train_ratio: r.train,
            val_ratio: r.val,
            test_ratio: r.test,
        }
    }
}

impl DataConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub flow: FlowProvider,
    pub data: DataConfig,
}

/// A tagged table that switches its tag starts from scratch, so fields of
/// the previous variant do not leak into the new one.
fn switches_variant(base: &toml::Table, layer: &toml::Table) -> bool {
    matches!((base.get("provider"), layer.get("provider")), (Some(a), Some(b)) if a != b)
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) if !switches_variant(b, &l) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parse `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Split `a.b.c=value` into its dotted key and value.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let s = s.trim_start_matches("--");
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && k.contains('.') => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::Config(format!("override `{s}` is not of the form section.key=value"))),
    }
}

impl Config {
    /// Defaults overlaid by `files` and then by dotted `overrides`.
    pub fn load(files: &[&Path], overrides: &[(String, String)]) -> Result<Config> {
        let toml::Value::Table(mut table) = toml::Value::try_from(Config::default()).expect("defaults serialize") else {
            unreachable!("config serializes to a table")
        };
        for path in files {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(*path, e))?;
            let layer: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, layer);
        }
        for (key, value) in overrides {
            let mut parts: Vec<&str> = key.split('.').collect();
            let last = parts.pop().expect("split yields one part");
            let mut cur = &mut table;
            for p in parts {
                let entry = cur
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                cur = match entry {
                    toml::Value::Table(t) => t,
                    _ => return Err(Error::Config(format!("`{key}`: `{p}` is not a section"))),
                };
            }
            let value = parse_literal(value);
            if last == "provider" && cur.get("provider").is_some_and(|p| *p != value) {
                cur.clear();
            }
            cur.insert(last.to_string(), value);
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.weights().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
