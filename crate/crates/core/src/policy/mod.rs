//! Tiny recurrent answer-generation policy conditioned on fused features.

mod checkpoint;
mod model;
mod params;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{
    accumulate_logprob_gradient, accumulate_projector_gradient, effective_output_weights, fuse_checked, fuse_features,
    greedy_decode, log_softmax, logprob_gradient, next_token_logprobs, project, sample_candidates,
    sequence_logprob, PromptContext, Rollout,
};
pub use params::{AdapterConfig, Layout, PolicyConfig, PolicyParams, Segment, TrainableMask};
pub use vocab::Vocabulary;
