use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::membank::BankConfig;
use crate::model::ModelConfig;
use crate::proposals::ProposalConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SicMode {
    /// Only the exact ground-truth proposal is paired with its crop.
    GtToGt,
    /// Every assigned prediction is paired with the crop of its own box.
    PosToPos,
    /// Every assigned prediction is paired with its ground truth's crop.
    ManyToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    Search,
    Instance,
    Both,
}

impl MaskMode {
    pub fn masks_search(self) -> bool {
        matches!(self, MaskMode::Search | MaskMode::Both)
    }

    pub fn masks_instance(self) -> bool {
        matches!(self, MaskMode::Instance | MaskMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub prob: f64,
    pub max_cells: usize,
    pub mode: MaskMode,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            prob: 0.5,
            max_cells: 2,
            mode: MaskMode::Search,
        }
    }
}

/// Everything that defines a training run. Loaded from TOML; every key is
/// optional and falls back to the desk-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub epochs: usize,
    pub lr: f64,
    /// Zero-based epochs from which the learning rate is multiplied by
    /// `lr_decay_factor` once more.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Linear warm-up over the first steps of training.
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Training resolution `[width, height]`; scenes are resized to it.
    pub image_size: [usize; 2],
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f64,
    pub sic_mode: SicMode,
    /// Siamese consistency between the two branches.
    pub siamese: bool,
    /// Hard-mined triplet contrast among all predictions.
    pub dense_triplet: bool,
    /// Memory-bank loss.
    pub oim: bool,
    pub margin: f64,
    pub clamp_triplet: bool,
    pub assignment_threshold: f64,
    pub recluster_every: usize,
    pub seed: u64,
    pub mask: MaskConfig,
    pub bank: BankConfig,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            name: "dicl".into(),
            epochs: 12,
            lr: 0.01,
            lr_decay_epochs: vec![8, 10],
            lr_decay_factor: 0.1,
            warmup_steps: 0,
            batch_size: 4,
            image_size: [320, 192],
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            sic_mode: SicMode::ManyToOne,
            siamese: true,
            dense_triplet: true,
            oim: true,
            margin: 0.3,
            clamp_triplet: true,
            assignment_threshold: 0.5,
            recluster_every: 1,
            seed: 0,
            mask: MaskConfig::default(),
            bank: BankConfig::default(),
            loss_weights: LossWeights::default(),
            model: ModelConfig::desk(),
            proposals: ProposalConfig::default(),
        }
    }
}

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DICL_SEED";

impl TrainConfig {
    /// Schedule of the original full-scale recipe: 26 epochs at 0.001,
    /// decayed after epochs 16 and 22, on 1500x900 images.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 26,
            lr: 0.001,
            lr_decay_epochs: vec![16, 22],
            image_size: [1500, 900],
            model: ModelConfig::default(),
            ..TrainConfig::default()
        }
    }

    /// The short end-to-end configuration.
    pub fn smoke() -> Self {
        TrainConfig {
            name: "smoke".into(),
            epochs: 4,
            lr_decay_epochs: vec![3],
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(toml_field(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `DICL_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if let Some(&d) = self.lr_decay_epochs.iter().find(|&&d| d >= self.epochs) {
            return Err(Error::config(
                "lr_decay_epochs",
                format!("decay epoch {d} is not before the last epoch ({})", self.epochs),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mask.prob) {
            return Err(Error::config("mask.prob", "must lie in [0, 1]"));
        }
        if !(self.assignment_threshold > 0.0 && self.assignment_threshold < 1.0) {
            return Err(Error::config("assignment_threshold", "must lie in (0, 1)"));
        }
        if self.margin < 0.0 {
            return Err(Error::config("margin", "must be non-negative"));
        }
        if self.recluster_every == 0 {
            return Err(Error::config("recluster_every", "must be at least 1"));
        }
        let [w, h] = self.image_size;
        if w < 32 || h < 32 {
            return Err(Error::config("image_size", "must be at least 32x32"));
        }
        self.bank.validate()?;
        self.model.validate()?;
        self.proposals.validate()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            clamp_triplet: self.clamp_triplet,
            temperature: self.bank.temperature,
            weights: self.loss_weights.clone(),
        }
    }

    /// Learning rate for a zero-based epoch, before warm-up.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn lr_at(&self, epoch: usize, step: u64) -> f64 {
        let base = self.lr_at_epoch(epoch);
        if self.warmup_steps > 0 && step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn toml_field(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.split('`').nth(1) {
        rest.to_string()
    } else {
        "config".to_string()
    }
}
