use pathrl::datagen::{build_dataset, default_backend, DatagenConfig};
use pathrl::embedding::{EmbeddingConfig, ReferenceEmbedder};
use pathrl::grpo::*;
use pathrl::policy::*;
use pathrl::rewards::RewardBreakdown;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 0.2;

fn settings(beta: f64) -> ObjectiveSettings {
    ObjectiveSettings {
        clip_epsilon: EPS,
        kl_beta: beta,
    }
}

fn config(vocab: usize) -> PolicyConfig {
    PolicyConfig {
        vocab_size: vocab,
        embed_dim: 4,
        hidden_dim: 5,
        projector_hidden: 4,
        feature_a_dim: 2,
        feature_b_dim: 2,
        adapter: None,
    }
}

fn perturbed(c: &PolicyConfig, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(c, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for x in p.flat_mut() {
        *x += rng.gen_range(-0.3..0.3);
    }
    p
}

fn ctx(seed: u64, vocab: usize) -> PromptContext {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PromptContext {
        prompt: (0..3).map(|_| rng.gen_range(0..vocab)).collect(),
        feature_a: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
        feature_b: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
    }
}

/// Group whose old log-probabilities sit `offsets[i]` below the current ones,
/// so the ratio of candidate `i` is `exp(offsets[i])`.
fn group(p: &PolicyParams, seed: u64, offsets: &[f64], advantages: &[f64], ref_shift: f64) -> RolloutGroup {
    let v = p.config().vocab_size;
    let context = ctx(seed, v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    let candidates = offsets
        .iter()
        .zip(advantages)
        .map(|(&off, &adv)| {
            let mut tokens: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..v)).collect();
            tokens.push(0);
            let (lp, _) = sequence_logprob(p, &context, &tokens).unwrap();
            Candidate {
                tokens,
                text: String::new(),
                old_logprob: Some(lp - off),
                ref_logprob: Some(lp + ref_shift),
                reward: RewardBreakdown::default(),
                advantage: adv,
            }
        })
        .collect();
    RolloutGroup { context, candidates }
}

/// Reference objective computed from scratch with the textbook formula.
fn oracle_objective(g: &RolloutGroup, p: &PolicyParams, beta: f64) -> f64 {
    let mut total = 0.0;
    for c in &g.candidates {
        let (lp, _) = sequence_logprob(p, &g.context, &c.tokens).unwrap();
        let s1 = (lp - c.old_logprob.unwrap()).exp();
        let s2 = s1.max(1.0 - EPS).min(1.0 + EPS);
        let d = c.ref_logprob.unwrap() - lp;
        let kl = d.exp() - d - 1.0;
        total += (s1 * c.advantage).min(s2 * c.advantage) - beta * kl;
    }
    total / g.candidates.len() as f64
}

fn check_gradient(g: &RolloutGroup, p: &PolicyParams, beta: f64) {
    let (value, grad) = grpo_objective(g, p, settings(beta)).unwrap();
    assert!((value - oracle_objective(g, p, beta)).abs() < 1e-10);
    assert!((value - grpo_objective_value(g, p, settings(beta)).unwrap()).abs() < 1e-14);
    let h = 1e-6;
    for i in 0..p.len() {
        let mut hi = p.clone();
        hi.flat_mut()[i] += h;
        let mut lo = p.clone();
        lo.flat_mut()[i] -= h;
        let fd = (oracle_objective(g, &hi, beta) - oracle_objective(g, &lo, beta)) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "index {i}: fd {fd} vs {}", grad[i]);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    // ratios exp(0.1), exp(-0.1) stay inside the trust region; exp(0.4) and
    // exp(-0.4) sit outside it on either side
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.1, -0.1, 0.05, 0.0], &[1.0, -1.0, 0.5, -0.5]),
        (&[0.4, -0.4, 0.4, -0.4], &[1.0, -1.0, -1.0, 1.0]),
        (&[0.4, 0.1, -0.4, -0.1], &[1.2, 0.3, -0.8, -0.7]),
    ];
    for (k, (offsets, adv)) in cases.iter().enumerate() {
        for beta in [0.0, 0.04] {
            let p = perturbed(&config(6), k as u64);
            let g = group(&p, k as u64, offsets, adv, -0.3);
            check_gradient(&g, &p, beta);
        }
    }
}

#[test]
fn clipped_branch_has_no_surrogate_gradient() {
    let p = perturbed(&config(6), 3);
    // ratio exp(0.4) > 1.2 with positive advantage: clipped branch is the min
    let g = group(&p, 3, &[0.4], &[1.0], 0.0);
    let (_, grad) = grpo_objective(&g, &p, settings(0.0)).unwrap();
    assert!(grad.iter().all(|&x| x == 0.0));
    // same ratio with negative advantage: unclipped branch is the min
    let g = group(&p, 3, &[0.4], &[-1.0], 0.0);
    let (_, grad) = grpo_objective(&g, &p, settings(0.0)).unwrap();
    assert!(grad.iter().any(|&x| x != 0.0));
}

#[test]
fn on_policy_gradient_is_advantage_weighted_score() {
    let p = perturbed(&config(6), 5);
    let adv = [1.5, -0.5, -1.0];
    let g = group(&p, 5, &[0.0, 0.0, 0.0], &adv, 0.0);
    let (value, grad) = grpo_objective(&g, &p, settings(0.04)).unwrap();
    assert!((value - adv.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    let mut expect = vec![0.0; p.len()];
    for (c, a) in g.candidates.iter().zip(adv) {
        let s = logprob_gradient(&p, &g.context, &c.tokens).unwrap();
        for (e, x) in expect.iter_mut().zip(s) {
            *e += a * x / 3.0;
        }
    }
    for (x, y) in grad.iter().zip(&expect) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ratio_above_trust_region() {
    let s = settings(0.0);
    let lp = 1.3f64.ln();
    let t = candidate_terms(lp, 0.0, lp, 1.0, s);
    assert!((t.ratio - 1.3).abs() < 1e-12);
    assert!((t.clipped_ratio - 1.2).abs() < 1e-12);
    assert!((t.surrogate - 1.2).abs() < 1e-12);
    assert_eq!(t.logprob_coeff, 0.0);
    let t = candidate_terms(lp, 0.0, lp, -1.0, s);
    assert!((t.surrogate + 1.3).abs() < 1e-12);
    assert!((t.logprob_coeff + 1.3).abs() < 1e-12);
}

#[test]
fn kl_examples() {
    assert_eq!(kl_estimate(-2.0, -2.0), 0.0);
    // d = ref - new = -1: e^-1 + 1 - 1
    assert!((kl_estimate(-1.0, -2.0) - (-1f64).exp()).abs() < 1e-15);
    assert!((kl_estimate(-2.0, -1.0) - (1f64.exp() - 2.0)).abs() < 1e-12);
    assert!(kl_estimate(0.0, 1e-9) >= 0.0);
}

#[test]
fn missing_logprobs_are_rejected() {
    let p = perturbed(&config(6), 1);
    let mut g = group(&p, 1, &[0.0], &[1.0], 0.0);
    g.candidates[0].ref_logprob = None;
    assert!(grpo_objective(&g, &p, settings(0.04)).is_err());
    let empty = RolloutGroup {
        context: g.context.clone(),
        candidates: vec![],
    };
    assert!(grpo_objective(&empty, &p, settings(0.04)).is_err());
    assert!(batch_objective(&[], &p, settings(0.04)).is_err());
}

#[test]
fn batch_is_mean_of_groups() {
    let p = perturbed(&config(6), 2);
    let groups: Vec<_> = (0..3).map(|s| group(&p, s, &[0.1, -0.3], &[1.0, -1.0], 0.2)).collect();
    let (v, g) = batch_objective(&groups, &p, settings(0.04)).unwrap();
    let mut ev = 0.0;
    let mut eg = vec![0.0; p.len()];
    for gr in &groups {
        let (a, b) = grpo_objective(gr, &p, settings(0.04)).unwrap();
        ev += a / 3.0;
        eg.iter_mut().zip(b).for_each(|(x, y)| *x += y / 3.0);
    }
    assert!((v - ev).abs() < 1e-12);
    for (x, y) in g.iter().zip(&eg) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn sft_examples(p: &PolicyParams, n: u64) -> Vec<SftExample> {
    let v = p.config().vocab_size;
    (0..n)
        .map(|s| SftExample {
            context: ctx(s, v),
            target: vec![(s as usize % (v - 1)) + 1, 2, 0],
        })
        .collect()
}

#[test]
fn sft_loss_gradient_matches_finite_differences() {
    let p = perturbed(&config(5), 9);
    let ex = sft_examples(&p, 3);
    let (loss, grad) = sft_loss_and_grad(&p, &ex).unwrap();
    assert!((loss - sft_loss(&p, &ex).unwrap()).abs() < 1e-12);
    let h = 1e-6;
    for i in 0..p.len() {
        let mut hi = p.clone();
        hi.flat_mut()[i] += h;
        let mut lo = p.clone();
        lo.flat_mut()[i] -= h;
        let fd = (sft_loss(&hi, &ex).unwrap() - sft_loss(&lo, &ex).unwrap()) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}");
    }
}

#[test]
fn zero_policy_loss_is_log_vocab() {
    let c = config(11);
    let p = PolicyParams::zeros(&c).unwrap();
    let loss = sft_loss(&p, &sft_examples(&p, 4)).unwrap();
    assert!((loss - 11f64.ln()).abs() < 1e-12);
}

#[test]
fn lr_schedules() {
    assert_eq!(LrSchedule::Constant.at(0.1, 50, 100), 0.1);
    assert!((LrSchedule::Cosine.at(0.1, 0, 100) - 0.1).abs() < 1e-15);
    assert!((LrSchedule::Cosine.at(0.1, 50, 100) - 0.05).abs() < 1e-12);
    let mut g = vec![3.0, 4.0];
    assert_eq!(clip_grad_norm(&mut g, Some(1.0)), 5.0);
    assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
}

fn tiny_data() -> (pathrl::datagen::Dataset, DatagenConfig) {
    let cfg = DatagenConfig {
        slides: 4,
        patches_per_slide: 20,
        pretrain_per_slide: 10,
        sft_per_slide: 5,
        rl_records: 20,
        cold_start: 10,
        feature_a_dim: 4,
        feature_b_dim: 4,
        ..DatagenConfig::default()
    };
    (build_dataset(3, &cfg, &default_backend(&cfg)).unwrap(), cfg)
}

fn tiny_policy(vocab: usize, adapter: bool) -> PolicyParams {
    PolicyParams::init(
        &PolicyConfig {
            vocab_size: vocab,
            embed_dim: 4,
            hidden_dim: 8,
            projector_hidden: 8,
            feature_a_dim: 4,
            feature_b_dim: 4,
            adapter: adapter.then_some(AdapterConfig { rank: 2, alpha: 4.0 }),
        },
        1,
    )
    .unwrap()
}

#[test]
fn alignment_touches_only_the_projector() {
    let (data, _) = tiny_data();
    let init = tiny_policy(data.vocab.len(), false);
    let cfg = SupervisedConfig {
        max_steps: 20,
        batch_size: 8,
        ..SupervisedConfig::default()
    };
    let (out, report) = align_train(&data.pretrain, init.clone(), &EmbeddingConfig::default(), &cfg).unwrap();
    let mask = TrainableMask::projector_only(init.layout());
    let mut moved = false;
    for i in 0..init.len() {
        if mask.is_trainable(i) {
            moved |= out.flat()[i] != init.flat()[i];
        } else {
            assert_eq!(out.flat()[i], init.flat()[i], "frozen slot {i} changed");
        }
    }
    assert!(moved);
    assert!(report.final_loss < report.initial_loss);
    assert_eq!(report.records.len(), 20);
}

#[test]
fn adapter_finetune_freezes_base_output() {
    let (data, _) = tiny_data();
    let init = tiny_policy(data.vocab.len(), true);
    let cfg = SupervisedConfig {
        max_steps: 5,
        batch_size: 4,
        ..SupervisedConfig::default()
    };
    let (out, _) = sft_train(&data.sft, &data.vocab, init.clone(), &cfg).unwrap();
    let l = init.layout();
    assert_eq!(out.segment(l.out_weight), init.segment(l.out_weight));
    assert_ne!(out.segment(l.adapter_b.unwrap()), init.segment(l.adapter_b.unwrap()));

    let enc = ReferenceEmbedder::default();
    let gcfg = GrpoConfig {
        max_steps: 2,
        batch_size: 3,
        max_new_tokens: 6,
        ..GrpoConfig::default()
    };
    let (after, report) = grpo_train(&data.rl, &data.vocab, out.clone(), &out, &enc, &gcfg).unwrap();
    assert_eq!(after.segment(l.out_weight), out.segment(l.out_weight));
    assert_eq!(report.records.len(), 2);
}

#[test]
fn grpo_is_deterministic_and_groups_are_normalised() {
    let (data, _) = tiny_data();
    let init = tiny_policy(data.vocab.len(), false);
    let enc = ReferenceEmbedder::default();
    let cfg = GrpoConfig {
        max_steps: 3,
        batch_size: 4,
        max_new_tokens: 8,
        ..GrpoConfig::default()
    };
    let a = grpo_train(&data.rl, &data.vocab, init.clone(), &init, &enc, &cfg).unwrap();
    let b = grpo_train(&data.rl, &data.vocab, init.clone(), &init, &enc, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    let g = build_group(&data.rl[0], &data.vocab, &init, &init, &enc, &cfg, 5).unwrap();
    assert_eq!(g.candidates.len(), 4);
    let s: f64 = g.candidates.iter().map(|c| c.advantage).sum();
    assert!(s.abs() < 1e-9);
    for c in &g.candidates {
        assert_eq!(c.old_logprob, c.ref_logprob);
    }
}

#[test]
fn invalid_grpo_configs() {
    for cfg in [
        GrpoConfig { group_size: 0, ..GrpoConfig::default() },
        GrpoConfig { clip_epsilon: 1.5, ..GrpoConfig::default() },
        GrpoConfig { kl_beta: -1.0, ..GrpoConfig::default() },
        GrpoConfig { temperature: 0.0, ..GrpoConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
    assert!(GrpoConfig::default().validate().is_ok());
}

proptest! {
    #[test]
    fn advantages_are_standardised(rewards in prop::collection::vec(0.0f64..3.5, 2..9)) {
        let g = normalize_advantages(&rewards, 1e-8);
        let n = rewards.len() as f64;
        let mean: f64 = rewards.iter().sum::<f64>() / n;
        let sd = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!((g.group_mean - mean).abs() < 1e-12);
        prop_assert!((g.group_std - sd).abs() < 1e-12);
        prop_assert!(g.advantages.iter().sum::<f64>().abs() < 1e-6);
        if sd > 1e-3 {
            let var = g.advantages.iter().map(|a| a * a).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
        for (a, r) in g.advantages.iter().zip(&rewards) {
            prop_assert!((a * (sd + 1e-8) - (r - mean)).abs() < 1e-9 || sd == 0.0);
        }
    }

    #[test]
    fn advantages_follow_permutation(rewards in prop::collection::vec(0.0f64..3.5, 2..9), shift in 1usize..8) {
        let k = shift % rewards.len();
        let mut rot = rewards.clone();
        rot.rotate_left(k);
        let a = normalize_advantages(&rewards, 1e-8).advantages;
        let mut b = normalize_advantages(&rot, 1e-8).advantages;
        b.rotate_right(k);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative(a in -50.0f64..0.0, b in -50.0f64..0.0) {
        let k = kl_estimate(a, b);
        prop_assert!(k >= 0.0);
        if (a - b).abs() > 1e-6 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn surrogate_is_pessimistic(logr in -1.0f64..1.0, adv in -3.0f64..3.0) {
        let t = candidate_terms(logr, 0.0, logr, adv, settings(0.0));
        prop_assert!(t.surrogate <= t.ratio * adv + 1e-12);
        prop_assert!(t.surrogate <= t.clipped_ratio * adv + 1e-12);
        prop_assert!(t.clipped_ratio >= 1.0 - EPS && t.clipped_ratio <= 1.0 + EPS);
    }
}
