//! Group-relative policy optimization and the three training stages.

mod advantage;
mod objective;
mod optim;
mod supervised;
mod trainer;

pub use advantage::{normalize_advantages, AdvantageGroup};
pub use objective::{
    accumulate_grpo_objective, batch_objective, candidate_terms, grpo_objective,
    grpo_objective_value, kl_estimate, Candidate, CandidateTerms, ObjectiveSettings, RolloutGroup,
};
pub use optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerKind};
pub use supervised::{
    align_train, alignment_examples, alignment_loss, alignment_loss_and_grad,
    alignment_projection, sft_loss, sft_loss_and_grad, sft_train, AlignExample, LossRecord,
    LossReport, SftExample, SupervisedConfig,
};
pub use trainer::{build_group, grpo_train, StepRecord, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub std_epsilon: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Whether the semantic term enters the reward used for advantages.
    pub semantic_reward: bool,
    pub max_grad_norm: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_epsilon: 0.2,
            kl_beta: 0.04,
            inner_epochs: 1,
            learning_rate: 2e-4,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 32,
            std_epsilon: 1e-8,
            max_steps: 500,
            seed: 0,
            temperature: 1.0,
            max_new_tokens: 40,
            semantic_reward: true,
            max_grad_norm: None,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size == 0 {
            return bad("group_size must be >= 1");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must be in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta must be >= 0");
        }
        if self.inner_epochs == 0 || self.batch_size == 0 || self.max_new_tokens == 0 {
            return bad("inner_epochs, batch_size and max_new_tokens must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) || !(self.std_epsilon >= 0.0) {
            return bad("learning_rate and temperature must be positive, std_epsilon non-negative");
        }
        Ok(())
    }
}
