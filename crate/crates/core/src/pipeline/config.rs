use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::primitives::WorldMode;

/// Adam moments and step-size guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Prior training schedule.
///
/// The default mirrors the large-scale recipe (16 samples per batch, 500k
/// steps, lr 1.3e-5 with ×0.66 decay). [`TrainConfig::desk`] is the
/// single-machine configuration used by the toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Frames (identity, expression) per step.
    pub batch_size: usize,
    /// Camera views rendered per frame.
    pub views_per_sample: usize,
    pub lr: f64,
    /// Steps at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weights: LossWeights,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Cameras never used for training (held-out views).
    pub exclude_cameras: Vec<usize>,
    pub world_mode: WorldMode,
    pub adam: AdamConfig,
    /// Seed of the fixed perceptual feature pyramid.
    pub perceptual_seed: u64,
    /// Initialize codebooks from the first batch's encoder outputs.
    pub codebook_data_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500_000,
            batch_size: 16,
            views_per_sample: 1,
            lr: 1.3e-5,
            milestones: vec![100_000, 200_000, 300_000, 400_000],
            gamma: 0.66,
            weights: LossWeights::default(),
            checkpoint_every: 10_000,
            seed: 0,
            exclude_cameras: Vec::new(),
            world_mode: WorldMode::default(),
            adam: AdamConfig::default(),
            perceptual_seed: PERCEPTUAL_SEED,
            codebook_data_init: true,
        }
    }
}

/// Seed of the perceptual pyramid shared by training, inversion and metrics.
pub const PERCEPTUAL_SEED: u64 = 0x5eed;
/// Seed of the identity-embedding pyramid used by `L_id`/`L_arc`.
pub const IDENTITY_SEED: u64 = 0x1d;

impl TrainConfig {
    /// 5k steps on the toy dataset, camera 5 held out.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 1,
            views_per_sample: 2,
            lr: 1e-3,
            milestones: vec![2500, 4000],
            checkpoint_every: 1000,
            exclude_cameras: vec![5],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if self.batch_size == 0 || self.views_per_sample == 0 {
            return Err(Error::Config("train.batch_size and train.views_per_sample must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("train.gamma must lie in (0, 1]".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be finite and non-negative".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("train.milestones must be strictly increasing".into()));
        }
        self.weights.validate()?;
        self.adam.validate()
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Two-stage inversion knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Step budget per stage is `scale_factor × frame count`.
    pub scale_factor: usize,
    /// Hard cap on steps per stage, applied after the budget.
    pub max_steps: Option<usize>,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Steps before early stopping may trigger.
    pub warmup: usize,
    /// Smoothing of the loss EMA.
    pub ema: f64,
    /// Consecutive checks without relative improvement `tol` before stopping.
    pub patience: usize,
    pub check_every: usize,
    pub tol: f64,
    pub weights: LossWeights,
    pub world_mode: WorldMode,
    pub adam: AdamConfig,
    pub perceptual_seed: u64,
    pub identity_seed: u64,
    /// Skip every stage-2 update (the model passes through unchanged).
    pub freeze_stage2: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            scale_factor: 10,
            max_steps: None,
            stage1_lr: 1e-4,
            stage2_lr: 1e-4,
            warmup: 200,
            ema: 0.99,
            patience: 20,
            check_every: 25,
            tol: 1e-4,
            weights: LossWeights::default(),
            world_mode: WorldMode::default(),
            adam: AdamConfig::default(),
            perceptual_seed: PERCEPTUAL_SEED,
            identity_seed: IDENTITY_SEED,
            freeze_stage2: false,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_factor == 0 {
            return Err(Error::Config("inversion.scale_factor must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config("inversion.ema must lie in [0, 1)".into()));
        }
        if self.check_every == 0 {
            return Err(Error::Config("inversion.check_every must be positive".into()));
        }
        for lr in [self.stage1_lr, self.stage2_lr] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config("inversion learning rates must be finite and non-negative".into()));
            }
        }
        self.weights.validate()?;
        self.adam.validate()
    }

    /// Steps per stage for `frames` input images.
    pub fn budget(&self, frames: usize) -> usize {
        let b = self.scale_factor * frames;
        self.max_steps.map_or(b, |m| b.min(m))
    }
}
