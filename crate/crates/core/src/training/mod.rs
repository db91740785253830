//! Losses, analytic gradients, the optimizer and the continual training loop.

mod loss;
mod optim;
mod stream;
mod trainer;

pub use loss::{
    anchor_losses, anchor_losses_and_grads, loss_and_grads, routing_loss, routing_loss_and_grad, BatchItem,
    Gradients, LossBreakdown, Targets,
};
pub use optim::{adamw_step, Moments, ParamGroup, RouterOptimizer};
pub use stream::{evaluate, evaluate_with, run_stream, stream_families, DataMode, EvalScores, ReplayPolicy, StreamOptions, StreamOutcome};
pub use trainer::{soft_target_neighbors, train_experience, StepLog, TrainLog, TrainOutcome};

use crate::error::{Error, Result};
use crate::registry::ModelRecord;

/// One supervised (query, model) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Query feature vector `h(q)`.
    pub features: Vec<f64>,
    /// Registry index of the gold model.
    pub gold: usize,
    pub domain: String,
    pub from_replay: bool,
    /// Source text, when the example came from a text dataset.
    pub instruction: Option<String>,
}

impl Example {
    pub fn new(features: Vec<f64>, gold: usize, domain: impl Into<String>) -> Self {
        Example {
            features,
            gold,
            domain: domain.into(),
            from_replay: false,
            instruction: None,
        }
    }
}

/// One step of the data stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Experience {
    pub label: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    /// Models first introduced by this experience, in registration order.
    pub new_models: Vec<ModelRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorVariant {
    /// Mean `1 - cos(v_t, v_prev)` over anchored rows.
    Cosine,
    /// Mean squared Euclidean drift over anchored rows.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftTargets {
    pub epsilon: f64,
    pub k_neighbors: usize,
}

impl Default for SoftTargets {
    fn default() -> Self {
        SoftTargets {
            epsilon: 0.02,
            k_neighbors: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhase {
    pub phase1_fraction: f64,
    pub phase1_lr_proj: f64,
    pub phase1_lr_emb: f64,
    pub anchors_phase1_only: bool,
}

impl Default for TwoPhase {
    fn default() -> Self {
        TwoPhase {
            phase1_fraction: 0.4,
            phase1_lr_proj: 1e-4,
            phase1_lr_emb: 5e-5,
            anchors_phase1_only: true,
        }
    }
}

/// Adaptive-moment hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub tau: f64,
    pub lr_proj: f64,
    pub lr_emb: f64,
    pub lambda_emb: f64,
    pub lambda_proj: f64,
    pub anchor_variant: AnchorVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub replay_loss_multiplier: f64,
    pub soft_targets: Option<SoftTargets>,
    pub two_phase: Option<TwoPhase>,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 1024,
            tau: 0.08,
            lr_proj: 3e-4,
            lr_emb: 5e-5,
            lambda_emb: 1e4,
            lambda_proj: 5e4,
            anchor_variant: AnchorVariant::Cosine,
            epochs: 5,
            batch_size: 64,
            replay_loss_multiplier: 5.0,
            soft_targets: None,
            two_phase: None,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_proj", self.lr_proj),
            ("lr_emb", self.lr_emb),
            ("lambda_emb", self.lambda_emb),
            ("lambda_proj", self.lambda_proj),
            ("replay_loss_multiplier", self.replay_loss_multiplier),
            ("weight_decay", self.optimizer.weight_decay),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidConfig("batch_size and embed_dim must be positive".into()));
        }
        if let Some(tp) = &self.two_phase {
            if !(tp.phase1_fraction > 0.0 && tp.phase1_fraction < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "phase1_fraction must lie in (0, 1), got {}",
                    tp.phase1_fraction
                )));
            }
        }
        if let Some(st) = &self.soft_targets {
            if !(0.0..1.0).contains(&st.epsilon) {
                return Err(Error::InvalidConfig(format!("soft-target epsilon must lie in [0, 1), got {}", st.epsilon)));
            }
        }
        Ok(())
    }
}
