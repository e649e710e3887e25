use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BackboneKind, Phase};
use crate::network::optim::AdamConfig;
use crate::sampler::{AugmentationPolicy, RatioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Warm-up, head fine-tuning, then main training.
    Foc,
    /// Main training only, without the clustering term.
    FocLight,
    WarmUpOnly,
}

impl Mode {
    pub fn phases(self) -> &'static [Phase] {
        match self {
            Mode::Foc => &[Phase::WarmUp, Phase::HeadFinetune, Phase::Main],
            Mode::FocLight => &[Phase::Main],
            Mode::WarmUpOnly => &[Phase::WarmUp],
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "foc" => Ok(Mode::Foc),
            "foc-light" => Ok(Mode::FocLight),
            "warm-up-only" => Ok(Mode::WarmUpOnly),
            other => Err(format!("unknown mode `{other}` (expected foc, foc-light or warm-up-only)")),
        }
    }
}

/// Which batches update which head type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// Even batches train normal heads, odd batches overclustering heads.
    Batch,
    /// Even epochs train normal heads, odd epochs overclustering heads.
    Epoch,
}

/// Items whose `(x1, x2)` pair enters the joint matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiPairs {
    All,
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseValues<T> {
    pub warm_up: T,
    pub head_finetune: T,
    pub main: T,
}

impl<T: Copy> PhaseValues<T> {
    pub fn get(&self, phase: Phase) -> T {
        match phase {
            Phase::WarmUp => self.warm_up,
            Phase::HeadFinetune => self.head_finetune,
            Phase::Main => self.main,
        }
    }
}

/// Run configuration, stored as TOML in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub r: f64,
    pub batch_size: usize,
    pub repetitions: usize,
    pub heads_per_type: usize,
    /// Overclustering width; six times the class count when absent.
    pub k: Option<usize>,
    pub seed: u64,
    pub backbone: BackboneKind,
    /// Checked against the data when present.
    pub input_channels: Option<usize>,
    pub alternation: Alternation,
    pub mi_pairs: MiPairs,
    /// Apply the inverse loss to unlabeled triples as well.
    pub ce_inverse_unlabeled: bool,
    /// Share of `auto` certain samples held out for validation.
    pub val_fraction: f64,
    pub epochs: PhaseValues<usize>,
    pub lr: PhaseValues<f64>,
    pub augmentation: AugmentationPolicy,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Foc,
            lambda_s: 1.0,
            lambda_u: 1.0,
            r: 0.5,
            batch_size: 32,
            repetitions: 3,
            heads_per_type: 5,
            k: None,
            seed: 0,
            backbone: BackboneKind::TinyConv,
            input_channels: None,
            alternation: Alternation::Batch,
            mi_pairs: MiPairs::All,
            ce_inverse_unlabeled: true,
            val_fraction: 0.2,
            epochs: PhaseValues {
                warm_up: 50,
                head_finetune: 20,
                main: 100,
            },
            lr: PhaseValues {
                warm_up: 1e-4,
                head_finetune: 1e-3,
                main: 1e-4,
            },
            augmentation: AugmentationPolicy::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Switches mode and applies the values the mode implies.
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        if mode == Mode::FocLight {
            self.lambda_u = 0.0;
            self.repetitions = 1;
            self.heads_per_type = 1;
        }
        self
    }

    pub fn ratio(&self) -> RatioConfig {
        RatioConfig {
            r: self.r,
            batch_size: self.batch_size,
            repetitions: self.repetitions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_s", self.lambda_s), ("lambda_u", self.lambda_u)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        self.ratio().validate()?;
        self.augmentation.validate()?;
        if self.heads_per_type == 0 {
            return Err(Error::config("heads_per_type", "must be at least 1"));
        }
        if self.mode == Mode::FocLight {
            if self.lambda_u != 0.0 {
                return Err(Error::config("lambda_u", "foc-light requires lambda_u = 0"));
            }
            if self.repetitions != 1 {
                return Err(Error::config("repetitions", "foc-light requires repetitions = 1"));
            }
            if self.heads_per_type != 1 {
                return Err(Error::config("heads_per_type", "foc-light requires heads_per_type = 1"));
            }
        }
        for phase in self.mode.phases() {
            let key = match phase {
                Phase::WarmUp => "warm_up",
                Phase::HeadFinetune => "head_finetune",
                Phase::Main => "main",
            };
            let lr = self.lr.get(*phase);
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::config(format!("lr.{key}"), "must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Parses a possibly partial file; missing keys, including keys of
    /// nested tables, keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: toml::de::Error| {
            let key = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(key, e.to_string().trim().to_string())
        };
        let given: toml::Table = toml::from_str(text).map_err(err)?;
        let mut merged = toml::Table::try_from(TrainConfig::default()).expect("config serializes");
        merge(&mut merged, given);
        let cfg: TrainConfig = merged.try_into().map_err(err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
