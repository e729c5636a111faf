//! Stage 1 (projector alignment) and stage 2 (cold-start instruction tuning).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, LrSchedule, Optimizer, OptimizerKind};
use crate::datagen::{stream_rng, PretrainPair, QARecord};
use crate::embedding::{build_embedder, cosine, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::policy::{
    accumulate_logprob_gradient, accumulate_projector_gradient, fuse_checked, project,
    sequence_logprob, PolicyParams, PromptContext, TrainableMask, Vocabulary,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub max_steps: usize,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            batch_size: 16,
            max_steps: 400,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub records: Vec<LossRecord>,
}

/// Epoch-wise shuffled mini-batches over `0..len`.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    tag: &'static str,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, seed: u64, tag: &'static str) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            seed,
            tag,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = stream_rng(self.seed, self.tag, self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Prompt context and end-terminated gold answer tokens of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub context: PromptContext,
    pub target: Vec<usize>,
}

impl SftExample {
    pub fn from_record(record: &QARecord, vocab: &Vocabulary) -> Self {
        Self {
            context: record.context(),
            target: vocab.encode_answer(&record.gold.full_text),
        }
    }
}

/// Mean per-token negative log-likelihood under teacher forcing.
pub fn sft_loss(params: &PolicyParams, examples: &[SftExample]) -> Result<f64> {
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    if tokens == 0 {
        return Err(Error::InvalidArgument("no target tokens".into()));
    }
    let nll: f64 = examples
        .par_iter()
        .map(|e| sequence_logprob(params, &e.context, &e.target).map(|(lp, _)| -lp))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(nll / tokens as f64)
}

pub fn sft_loss_and_grad(params: &PolicyParams, examples: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    if tokens == 0 {
        return Err(Error::InvalidArgument("no target tokens".into()));
    }
    let scale = -1.0 / tokens as f64;
    let parts: Vec<(f64, Vec<f64>)> = examples
        .par_iter()
        .map(|e| {
            let mut g = vec![0.0; params.len()];
            let lp = accumulate_logprob_gradient(params, &e.context, &e.target, scale, &mut g)?;
            Ok((lp, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut nll = 0.0;
    for (lp, g) in parts {
        nll -= lp;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((nll / tokens as f64, grad))
}

/// Teacher-forced instruction tuning of projector and policy together.
pub fn sft_train(
    records: &[QARecord],
    vocab: &Vocabulary,
    init: PolicyParams,
    cfg: &SupervisedConfig,
) -> Result<(PolicyParams, LossReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty instruction-tuning set".into()));
    }
    let examples: Vec<SftExample> = records.iter().map(|r| SftExample::from_record(r, vocab)).collect();
    let mut params = init;
    let mask = TrainableMask::for_finetune(params.layout());
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed, "sft-epoch");
    let initial_loss = sft_loss(&params, &examples)?;
    let mut records_out = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch: Vec<SftExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let (loss, mut grad) = sft_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("sft loss {loss} at step {step}")));
        }
        clip_grad_norm(&mut grad, cfg.max_grad_norm);
        let lr = cfg.lr_schedule.at(cfg.learning_rate, step, cfg.max_steps);
        opt.step(&mut params, &mut grad, &mask, lr, -1.0)
            .map_err(|e| Error::NonFinite(format!("sft step {step}: {e}")))?;
        records_out.push(LossRecord { step, loss, lr });
    }
    let final_loss = sft_loss(&params, &examples)?;
    Ok((
        params,
        LossReport {
            initial_loss,
            final_loss,
            records: records_out,
        },
    ))
}

/// Fixed Gaussian map from text-embedding space into the policy's hidden
/// space, row-major `hidden × embedding`.
pub fn alignment_projection(embedding_dim: usize, hidden_dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, "align-projection", 0);
    let scale = 1.0 / (embedding_dim as f64).sqrt();
    (0..hidden_dim * embedding_dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignExample {
    pub fused: Vec<f64>,
    pub target: Vec<f64>,
}

/// Mean `1 - cos(project(fused), target)` and its projector gradient.
pub fn alignment_loss_and_grad(params: &PolicyParams, batch: &[AlignExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty alignment batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for ex in batch {
        let y = project(&ex.fused, params)?;
        let c = cosine(&y, &ex.target)?;
        loss += (1.0 - c) / n;
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = ex.target.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ny == 0.0 || nt == 0.0 {
            continue;
        }
        // d(1 - cos)/dy = -(t / (|y||t|) - cos · y / |y|²)
        let dy: Vec<f64> = y
            .iter()
            .zip(&ex.target)
            .map(|(yi, ti)| -(ti / (ny * nt) - c * yi / (ny * ny)) / n)
            .collect();
        accumulate_projector_gradient(params, &ex.fused, &dy, &mut grad)?;
    }
    Ok((loss, grad))
}

pub fn alignment_loss(params: &PolicyParams, batch: &[AlignExample]) -> Result<f64> {
    let mut loss = 0.0;
    for ex in batch {
        loss += 1.0 - cosine(&project(&ex.fused, params)?, &ex.target)?;
    }
    Ok(loss / batch.len().max(1) as f64)
}

pub fn alignment_examples(
    pool: &[PretrainPair],
    params: &PolicyParams,
    embed_cfg: &EmbeddingConfig,
    seed: u64,
) -> Result<Vec<AlignExample>> {
    let encoder = build_embedder(embed_cfg)?;
    let d = encoder.dimension();
    let h = params.config().hidden_dim;
    let map = alignment_projection(d, h, seed);
    pool.iter()
        .map(|p| {
            let e = encoder.embed(&p.caption)?;
            let target = map
                .chunks_exact(d)
                .map(|row| row.iter().zip(&e).map(|(a, b)| a * b).sum())
                .collect();
            Ok(AlignExample {
                fused: fuse_checked(params, &p.feature_a, &p.feature_b)?,
                target,
            })
        })
        .collect()
}

/// Trains only the projector to map fused features onto the (randomly
/// projected) caption embeddings. Every other parameter is left untouched.
pub fn align_train(
    pool: &[PretrainPair],
    init: PolicyParams,
    embed_cfg: &EmbeddingConfig,
    cfg: &SupervisedConfig,
) -> Result<(PolicyParams, LossReport)> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining pool".into()));
    }
    let examples = alignment_examples(pool, &init, embed_cfg, cfg.seed)?;
    let mut params = init;
    let mask = TrainableMask::projector_only(params.layout());
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed, "align-epoch");
    let initial_loss = alignment_loss(&params, &examples)?;
    let mut records = Vec::with_capacity(cfg.max_steps);
    for step in 0..cfg.max_steps {
        let batch: Vec<AlignExample> = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| examples[i].clone())
            .collect();
        let (loss, mut grad) = alignment_loss_and_grad(&params, &batch)?;
        clip_grad_norm(&mut grad, cfg.max_grad_norm);
        let lr = cfg.lr_schedule.at(cfg.learning_rate, step, cfg.max_steps);
        opt.step(&mut params, &mut grad, &mask, lr, -1.0)
            .map_err(|e| Error::NonFinite(format!("align step {step}: {e}")))?;
        records.push(LossRecord { step, loss, lr });
    }
    let final_loss = alignment_loss(&params, &examples)?;
    Ok((
        params,
        LossReport {
            initial_loss,
            final_loss,
            records,
        },
    ))
}
