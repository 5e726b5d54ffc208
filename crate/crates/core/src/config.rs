//! Run configuration. One TOML file holds every hyperparameter; missing keys
//! take the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Square training patch side; 0 trains on whole images.
    pub patch_size: usize,
    /// Ignore unlabeled data entirely (`lambda_unsup` treated as 0).
    pub supervised_only: bool,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub checkpoint: CheckpointConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_unsup: f64,
    pub lambda_r: f64,
    pub lambda_dual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub milestones: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
}

/// Block used by the detail repair branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// No detail branch at all (`g = 0`).
    None,
    /// Plain conv-act-conv-act stack.
    Direct,
    /// Conv-act-conv with identity skip.
    Residual,
    /// Two dilated-concatenation stages with batch norm and identity skip.
    Sdcab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub rrn_blocks: usize,
    pub drn_blocks: usize,
    pub se: bool,
    pub se_reduction: usize,
    pub drn_block: BlockKind,
    pub dilations: Vec<usize>,
    /// Initialize both output convolutions to zero so training starts from
    /// the identity `derain(O) = O`.
    pub zero_init_heads: bool,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Convolutions per stage; each stage ends in a 2x2 max pool.
    pub stage_convs: Vec<usize>,
    pub stage_widths: Vec<usize>,
    /// 1-based pooling stages whose outputs are tapped.
    pub taps: Vec<usize>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Optional per-channel `(x - mean) / std` applied before the first conv.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_mean: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize_std: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub bank_capacity: usize,
    /// Negatives per anchor (`m`).
    pub negatives: usize,
    /// Per-tap weights.
    pub weights: Vec<f64>,
    pub eps: f64,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Store memory-bank contents in checkpoints.
    pub include_bank: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 150,
            batch_size: 8,
            patch_size: 100,
            supervised_only: false,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::default(),
            contrastive: ContrastiveConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_unsup: 1.0,
            lambda_r: 0.5,
            lambda_dual: 0.5,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            decay_factor: 0.2,
            milestones: vec![30, 50, 80],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad_norm: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 64,
            rrn_blocks: 16,
            drn_blocks: 16,
            se: true,
            se_reduction: 16,
            drn_block: BlockKind::Sdcab,
            dilations: vec![1, 3, 5],
            zero_init_heads: true,
            init_seed: 0,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            stage_convs: vec![2, 2, 3, 3, 3],
            stage_widths: vec![64, 128, 256, 512, 512],
            taps: vec![2, 3, 5],
            seed: 0,
            weights: None,
            normalize_mean: None,
            normalize_std: None,
        }
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            bank_capacity: 64,
            negatives: 4,
            weights: vec![0.2, 0.5, 1.0],
            eps: 1e-7,
            encoder: EncoderConfig::default(),
        }
    }
}

impl EncoderConfig {
    /// VGG-16 layout with every stage width divided by `divisor`.
    pub fn vgg16_scaled(divisor: usize) -> Self {
        let d = divisor.max(1);
        EncoderConfig {
            stage_widths: [64, 128, 256, 512, 512].iter().map(|w| (w / d).max(1)).collect(),
            ..Default::default()
        }
    }

    /// Three single-conv stages, for unit-scale tests on 8x8 inputs.
    pub fn tiny(seed: u64) -> Self {
        EncoderConfig {
            stage_convs: vec![1, 1, 1],
            stage_widths: vec![4, 6, 8],
            taps: vec![1, 2, 3],
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_convs.is_empty() || self.stage_convs.len() != self.stage_widths.len() {
            return Err(Error::Config(
                "encoder stage_convs and stage_widths must be non-empty and equally long".into(),
            ));
        }
        if self.stage_convs.iter().chain(&self.stage_widths).any(|&v| v == 0) {
            return Err(Error::Config("encoder stages need >= 1 conv and width".into()));
        }
        if self.taps.is_empty()
            || self.taps.iter().any(|&t| t == 0 || t > self.stage_convs.len())
            || self.taps.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "encoder taps must be strictly increasing stage indices (1-based)".into(),
            ));
        }
        if self.normalize_mean.is_some() != self.normalize_std.is_some() {
            return Err(Error::Config("normalize_mean and normalize_std go together".into()));
        }
        if let Some(std) = self.normalize_std {
            if std.iter().any(|s| *s <= 0.0) {
                return Err(Error::Config("normalize_std must be positive".into()));
            }
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 {
            return err("model.channels must be >= 1");
        }
        if self.se && (self.se_reduction == 0 || !self.channels.is_multiple_of(self.se_reduction)) {
            return err("model.se_reduction must divide model.channels");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return err("model.dilations must be a non-empty list of positive integers");
        }
        Ok(())
    }
}

impl TrainConfig {
    /// Desk-scale model: 16 channels, 4 blocks per branch, and an encoder
    /// with VGG-16 topology at 1/16 width.
    pub fn micro() -> Self {
        let mut cfg = TrainConfig::default();
        cfg.model.channels = 16;
        cfg.model.rrn_blocks = 4;
        cfg.model.drn_blocks = 4;
        cfg.contrastive.encoder = EncoderConfig::vgg16_scaled(16);
        cfg
    }

    pub fn patch(&self) -> Option<usize> {
        (self.patch_size > 0).then_some(self.patch_size)
    }

    /// Effective unsupervised weight (zero in supervised-only mode).
    pub fn lambda_unsup(&self) -> f64 {
        if self.supervised_only {
            0.0
        } else {
            self.loss.lambda_unsup
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        let l = &self.loss;
        if [l.lambda_unsup, l.lambda_r, l.lambda_dual]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return err("loss weights must be finite and >= 0");
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return err("optim.lr must be positive");
        }
        if !(o.decay_factor > 0.0 && o.decay_factor < 1.0) {
            return err("optim.decay_factor must lie in (0, 1)");
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err("optim.milestones must be strictly increasing");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return err("adam betas must lie in [0, 1) and eps must be positive");
        }
        if o.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return err("optim.clip_grad_norm must be positive");
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1");
        }
        self.model.validate()?;
        let c = &self.contrastive;
        if c.bank_capacity == 0 {
            return err("contrastive.bank_capacity must be >= 1");
        }
        if c.negatives == 0 {
            return err("contrastive.negatives must be >= 1");
        }
        if !(c.eps > 0.0) {
            return err("contrastive.eps must be positive");
        }
        if c.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return err("contrastive.weights must be finite and >= 0");
        }
        if c.weights.len() != c.encoder.taps.len() {
            return err("contrastive.weights needs one entry per encoder tap");
        }
        c.encoder.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml(&text)
    }
}
