use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::normalize_advantages;
use super::objective::{batch_objective, kl_estimate, Candidate, ObjectiveSettings, RolloutGroup};
use super::optim::{clip_grad_norm, Optimizer};
use super::supervised::BatchSampler;
use super::GrpoConfig;
use crate::datagen::{stream_rng, QARecord};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::policy::{sample_candidates, sequence_logprob, PolicyParams, TrainableMask, Vocabulary};
use crate::rewards::total_reward;

/// One optimization step of the RL stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_accuracy: f64,
    pub mean_semantic: f64,
    pub format_rate: f64,
    pub mean_kl: f64,
    pub objective: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        crate::io::to_jsonl(&self.records)
    }

    /// Mean of `f` over the first and last `fraction` of steps.
    pub fn head_tail_mean(&self, fraction: f64, f: impl Fn(&StepRecord) -> f64) -> (f64, f64) {
        let n = self.records.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |rs: &[StepRecord]| rs.iter().map(&f).sum::<f64>() / rs.len().max(1) as f64;
        (mean(&self.records[..k.min(n)]), mean(&self.records[n.saturating_sub(k)..]))
    }
}

/// Samples and scores `group_size` candidates for one record.
pub fn build_group(
    record: &QARecord,
    vocab: &Vocabulary,
    sampler: &PolicyParams,
    reference: &PolicyParams,
    encoder: &dyn Embedder,
    cfg: &GrpoConfig,
    rng_seed: u64,
) -> Result<RolloutGroup> {
    let context = record.context();
    let rollouts = sample_candidates(
        sampler,
        vocab,
        &context,
        cfg.group_size,
        cfg.temperature,
        cfg.max_new_tokens,
        rng_seed,
    )?;
    let mut candidates = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let reward = total_reward(&r.generated_text, &record.gold, &record.answer_space, encoder)?;
        let (ref_lp, _) = sequence_logprob(reference, &context, &r.tokens)?;
        candidates.push(Candidate {
            tokens: r.tokens,
            text: r.generated_text,
            old_logprob: Some(r.total_logprob),
            ref_logprob: Some(ref_lp),
            reward,
            advantage: 0.0,
        });
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            if cfg.semantic_reward {
                c.reward.total
            } else {
                c.reward.total - c.reward.semantic
            }
        })
        .collect();
    let adv = normalize_advantages(&scores, cfg.std_epsilon);
    for (c, a) in candidates.iter_mut().zip(adv.advantages) {
        c.advantage = a;
    }
    Ok(RolloutGroup { context, candidates })
}

fn seed_for(seed: u64, step: usize, slot: usize) -> u64 {
    use rand::RngCore;
    stream_rng(seed, "grpo-rollout", ((step as u64) << 20) | slot as u64).next_u64()
}

/// Group-relative RL over `records`, starting from `init` and penalizing
/// drift from the frozen `reference`.
pub fn grpo_train(
    records: &[QARecord],
    vocab: &Vocabulary,
    init: PolicyParams,
    reference: &PolicyParams,
    encoder: &dyn Embedder,
    cfg: &GrpoConfig,
) -> Result<(PolicyParams, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty RL split".into()));
    }
    let settings = ObjectiveSettings {
        clip_epsilon: cfg.clip_epsilon,
        kl_beta: cfg.kl_beta,
    };
    let mut params = init;
    let mask = TrainableMask::for_finetune(params.layout());
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let mut sampler = BatchSampler::new(records.len(), cfg.seed, "grpo-epoch");
    let mut report = TrainReport::default();

    for step in 0..cfg.max_steps {
        let batch = sampler.next_batch(cfg.batch_size);
        let old = params.clone();
        let groups: Vec<RolloutGroup> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                build_group(&records[i], vocab, &old, reference, encoder, cfg, seed_for(cfg.seed, step, slot))
            })
            .collect::<Result<_>>()?;

        let lr = cfg.lr_schedule.at(cfg.learning_rate, step, cfg.max_steps);
        let mut first_objective = None;
        for _ in 0..cfg.inner_epochs {
            let (objective, mut grad) = batch_objective(&groups, &params, settings)?;
            if !objective.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective {objective} at step {step} (lr {lr}, batch {batch:?})"
                )));
            }
            first_objective.get_or_insert(objective);
            clip_grad_norm(&mut grad, cfg.max_grad_norm);
            opt.step(&mut params, &mut grad, &mask, lr, 1.0)
                .map_err(|e| Error::NonFinite(format!("grpo step {step} (lr {lr}): {e}")))?;
        }

        let cands: Vec<&Candidate> = groups.iter().flat_map(|g| &g.candidates).collect();
        let n = cands.len() as f64;
        let mean = |f: &dyn Fn(&Candidate) -> f64| cands.iter().map(|c| f(c)).sum::<f64>() / n;
        report.records.push(StepRecord {
            step,
            mean_reward: mean(&|c| c.reward.total),
            mean_format: mean(&|c| c.reward.format),
            mean_accuracy: mean(&|c| c.reward.accuracy),
            mean_semantic: mean(&|c| c.reward.semantic),
            format_rate: mean(&|c| if c.reward.format > 0.0 { 1.0 } else { 0.0 }),
            mean_kl: mean(&|c| kl_estimate(c.old_logprob.unwrap(), c.ref_logprob.unwrap())),
            objective: first_objective.unwrap_or(0.0),
            lr,
        });
    }
    Ok((params, report))
}
