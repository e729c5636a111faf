//! Clipped, KL-penalized group objective.
//!
//! For candidate `i` with advantage `A_i`:
//!
//! ```text
//! s1   = exp(log π_θ(d_i|q) - log π_old(d_i|q))
//! s2   = clip(s1, 1 - ε, 1 + ε)
//! kl_i = exp(log π_ref - log π_θ) - (log π_ref - log π_θ) - 1
//! J    = mean_i [ min(s1·A_i, s2·A_i) - β·kl_i ]
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{accumulate_logprob_gradient, sequence_logprob, PolicyParams, PromptContext};
use crate::rewards::RewardBreakdown;

/// Non-negative per-sequence KL estimator between the current and reference
/// policies, zero exactly when the two log-probabilities agree.
pub fn kl_estimate(logp_new: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_new;
    // exp(d) - d - 1 loses all precision near 0; expm1 keeps it
    (d.exp_m1() - d).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    pub text: String,
    pub old_logprob: Option<f64>,
    pub ref_logprob: Option<f64>,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

/// One prompt's sampled candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub context: PromptContext,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
}

/// Per-candidate pieces of the objective at the current parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateTerms {
    pub ratio: f64,
    pub clipped_ratio: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// d(contribution)/d(log π_θ).
    pub logprob_coeff: f64,
}

pub fn candidate_terms(logp: f64, old: f64, reference: f64, advantage: f64, s: ObjectiveSettings) -> CandidateTerms {
    let ratio = (logp - old).exp();
    let clipped_ratio = ratio.clamp(1.0 - s.clip_epsilon, 1.0 + s.clip_epsilon);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    // when the clipped branch is the strict minimum it is constant in θ
    let (surrogate, surrogate_coeff) = if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    };
    let kl = kl_estimate(logp, reference);
    // d kl / d logp = 1 - exp(ref - logp)
    let kl_coeff = -(reference - logp).exp_m1();
    CandidateTerms {
        ratio,
        clipped_ratio,
        surrogate,
        kl,
        logprob_coeff: surrogate_coeff - s.kl_beta * kl_coeff,
    }
}

fn required(c: &Candidate) -> Result<(f64, f64)> {
    match (c.old_logprob, c.ref_logprob) {
        (Some(o), Some(r)) => Ok((o, r)),
        _ => Err(Error::InvalidArgument(
            "rollout candidate lacks old-policy or reference log-probability".into(),
        )),
    }
}

/// Objective value only.
pub fn grpo_objective_value(group: &RolloutGroup, params: &PolicyParams, s: ObjectiveSettings) -> Result<f64> {
    if group.candidates.is_empty() {
        return Err(Error::InvalidArgument("empty rollout group".into()));
    }
    let mut total = 0.0;
    for c in &group.candidates {
        let (old, reference) = required(c)?;
        let (logp, _) = sequence_logprob(params, &group.context, &c.tokens)?;
        let t = candidate_terms(logp, old, reference, c.advantage, s);
        total += t.surrogate - s.kl_beta * t.kl;
    }
    Ok(total / group.candidates.len() as f64)
}

/// Objective and its exact gradient, accumulated into `grad` with weight
/// `scale`. Returns the unscaled objective.
pub fn accumulate_grpo_objective(
    group: &RolloutGroup,
    params: &PolicyParams,
    s: ObjectiveSettings,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if group.candidates.is_empty() {
        return Err(Error::InvalidArgument("empty rollout group".into()));
    }
    let n = group.candidates.len() as f64;
    let mut total = 0.0;
    for c in &group.candidates {
        let (old, reference) = required(c)?;
        let (logp, _) = sequence_logprob(params, &group.context, &c.tokens)?;
        let t = candidate_terms(logp, old, reference, c.advantage, s);
        total += t.surrogate - s.kl_beta * t.kl;
        if t.logprob_coeff != 0.0 {
            accumulate_logprob_gradient(params, &group.context, &c.tokens, scale * t.logprob_coeff / n, grad)?;
        }
    }
    Ok(total / n)
}

/// Objective of one group and its gradient with respect to the flat
/// parameter vector; trainers ascend it.
pub fn grpo_objective(group: &RolloutGroup, params: &PolicyParams, s: ObjectiveSettings) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let value = accumulate_grpo_objective(group, params, s, 1.0, &mut grad)?;
    Ok((value, grad))
}

/// Mean objective over a batch of groups. Per-group gradients are computed
/// in parallel and summed in group order.
pub fn batch_objective(
    groups: &[RolloutGroup],
    params: &PolicyParams,
    s: ObjectiveSettings,
) -> Result<(f64, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<f64>)> = groups
        .par_iter()
        .map(|g| grpo_objective(g, params, s))
        .collect::<Result<_>>()?;
    let n = groups.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut value = 0.0;
    for (v, g) in parts {
        value += v / n;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b / n;
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(-3.0, -3.0), 0.0);
        assert!((kl_estimate(-1.0, -2.0) - (-1.0f64).exp()).abs() < 1e-12);
        for (a, b) in [(-40.0, -0.1), (-0.1, -40.0), (3.0, -3.0), (-1e-9, 0.0)] {
            assert!(kl_estimate(a, b) >= 0.0);
        }
        assert!(kl_estimate(-1e-6, 0.0) > 0.0);
    }

    #[test]
    fn clipped_branch_has_no_surrogate_gradient() {
        let s = ObjectiveSettings { clip_epsilon: 0.2, kl_beta: 0.0 };
        let t = candidate_terms(1.3f64.ln(), 0.0, 0.0, 2.0, s);
        assert!((t.surrogate - 1.2 * 2.0).abs() < 1e-12);
        assert_eq!(t.logprob_coeff, 0.0);
        assert!((t.clipped_ratio - 1.2).abs() < 1e-15);
        // negative advantage picks the unclipped, smaller branch
        let t = candidate_terms(1.3f64.ln(), 0.0, 0.0, -2.0, s);
        assert!((t.surrogate + 1.3 * 2.0).abs() < 1e-12);
        assert!((t.logprob_coeff + 2.6).abs() < 1e-12);
    }
}
