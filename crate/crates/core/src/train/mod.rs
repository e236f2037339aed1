//! Optimization: warmup schedule, Adam, joint-loss training steps,
//! checkpoint cadence with exact resume, and checkpoint averaging.

mod average;
mod optim;
mod schedule;
mod state;
mod step;
mod trainer;

pub use average::{average_checkpoints, average_params, select_top_k};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use schedule::lr_at;
pub use state::{load_train_state, save_train_state, state_path_for, TrainState};
pub use step::{batch_loss, train_step, validation_loss, BatchGrads, StepRecord};
pub use trainer::{batch_indices, run_training, step_rng, TrainOutcome, CKPT_DIR, FINAL_NAME, LOG_NAME};

use crate::error::{usage, Result};
use crate::frontend::{SpecAugConfig, SpecSubConfig};
use crate::loss::LossWeights;
use crate::model::ChunkPolicy;
use crate::numerics::Precision;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; zero or negative disables clipping.
    pub grad_clip: f64,
    pub chunk_policy: ChunkPolicy,
    pub checkpoint_every: usize,
    pub average_top_k: usize,
    pub spec_sub: Option<SpecSubConfig>,
    pub spec_aug: Option<SpecAugConfig>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.0,
            warmup_steps: 1000,
            max_steps: 2000,
            batch_size: 8,
            seed: 1,
            weights: LossWeights::default(),
            label_smoothing: 0.1,
            adam: AdamConfig::default(),
            grad_clip: 5.0,
            chunk_policy: ChunkPolicy::default(),
            checkpoint_every: 100,
            average_top_k: 5,
            spec_sub: Some(SpecSubConfig::default()),
            spec_aug: Some(SpecAugConfig::default()),
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("warmup_steps", self.warmup_steps),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("average_top_k", self.average_top_k),
        ] {
            if v == 0 {
                return Err(usage(format!("{name} must be at least 1")));
            }
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(usage(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(usage("label_smoothing must lie in [0, 1)"));
        }
        self.adam.validate()?;
        self.chunk_policy.validate()?;
        if let Some(s) = &self.spec_sub {
            s.validate()?;
        }
        Ok(())
    }
}
