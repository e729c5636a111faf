//! Forward pass, exact backpropagation and sampling for the recurrent policy.
//!
//! ```text
//! h_0     = W2 · tanh(W1 · [feature_a ; feature_b] + b1) + b2
//! h_k     = tanh(W_rec · [h_{k-1} ; emb(x_k)] + b_rec)      (prompt, then answer)
//! logits  = (W_out + (alpha/r) · B · A) · h + b_out
//! ```
//!
//! The logits for answer token `j` are read from the state reached after the
//! prompt and answer tokens `< j`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::PolicyParams;
use super::vocab::{Vocabulary, EOS_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub prompt: Vec<usize>,
    pub feature_a: Vec<f64>,
    pub feature_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub per_token_logprob: Vec<f64>,
    pub total_logprob: f64,
    pub generated_text: String,
}

/// `y += M · x` for row-major `M` of shape `rows × x.len()`.
fn matvec_add(m: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (row, yi) in m.chunks_exact(cols).zip(y.iter_mut()) {
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `y += Mᵀ · x` for row-major `M` of shape `x.len() × y.len()`.
fn matvec_t_add(m: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = y.len();
    for (row, &xi) in m.chunks_exact(cols).zip(x) {
        if xi != 0.0 {
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += a * xi;
            }
        }
    }
}

/// `M += scale · u ⊗ v`.
fn outer_add(m: &mut [f64], u: &[f64], v: &[f64], scale: f64) {
    let cols = v.len();
    for (row, &ui) in m.chunks_exact_mut(cols).zip(u) {
        let s = ui * scale;
        if s != 0.0 {
            for (mj, vj) in row.iter_mut().zip(v) {
                *mj += s * vj;
            }
        }
    }
}

pub fn fuse_features(feature_a: &[f64], feature_b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(feature_a.len() + feature_b.len());
    v.extend_from_slice(feature_a);
    v.extend_from_slice(feature_b);
    v
}

/// Concatenates the two feature vectors after checking them against the
/// configured widths.
pub fn fuse_checked(params: &PolicyParams, feature_a: &[f64], feature_b: &[f64]) -> Result<Vec<f64>> {
    let c = params.config();
    if feature_a.len() != c.feature_a_dim {
        return Err(Error::DimensionMismatch {
            what: "feature_a",
            expected: c.feature_a_dim,
            actual: feature_a.len(),
        });
    }
    if feature_b.len() != c.feature_b_dim {
        return Err(Error::DimensionMismatch {
            what: "feature_b",
            expected: c.feature_b_dim,
            actual: feature_b.len(),
        });
    }
    Ok(fuse_features(feature_a, feature_b))
}

struct ProjectorTrace {
    hidden_act: Vec<f64>,
    out: Vec<f64>,
}

fn project_traced(fused: &[f64], params: &PolicyParams) -> Result<ProjectorTrace> {
    let c = params.config();
    let l = params.layout();
    if fused.len() != c.fused_dim() {
        return Err(Error::DimensionMismatch {
            what: "fused features",
            expected: c.fused_dim(),
            actual: fused.len(),
        });
    }
    let mut a = params.segment(l.proj_b1).to_vec();
    matvec_add(params.segment(l.proj_w1), fused, &mut a);
    a.iter_mut().for_each(|x| *x = x.tanh());
    let mut out = params.segment(l.proj_b2).to_vec();
    matvec_add(params.segment(l.proj_w2), &a, &mut out);
    Ok(ProjectorTrace { hidden_act: a, out })
}

// h_0 = W2 a + b2, a = tanh(W1 f + b1)
fn projector_backward(params: &PolicyParams, fused: &[f64], hidden_act: &[f64], d_out: &[f64], grad: &mut [f64]) {
    let l = params.layout();
    outer_add(&mut grad[l.proj_w2.range()], d_out, hidden_act, 1.0);
    for (g, d) in grad[l.proj_b2.range()].iter_mut().zip(d_out) {
        *g += d;
    }
    let mut da = vec![0.0; hidden_act.len()];
    matvec_t_add(params.segment(l.proj_w2), d_out, &mut da);
    let du: Vec<f64> = da
        .iter()
        .zip(hidden_act)
        .map(|(d, a)| d * (1.0 - a * a))
        .collect();
    outer_add(&mut grad[l.proj_w1.range()], &du, fused, 1.0);
    for (g, d) in grad[l.proj_b1.range()].iter_mut().zip(&du) {
        *g += d;
    }
}

/// Adds the gradient of `d_out · project(fused)` into `grad` and returns the
/// projector output.
pub fn accumulate_projector_gradient(
    params: &PolicyParams,
    fused: &[f64],
    d_out: &[f64],
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    let trace = project_traced(fused, params)?;
    if d_out.len() != trace.out.len() {
        return Err(Error::DimensionMismatch {
            what: "projector output gradient",
            expected: trace.out.len(),
            actual: d_out.len(),
        });
    }
    projector_backward(params, fused, &trace.hidden_act, d_out, grad);
    Ok(trace.out)
}

/// Two-layer projector into the policy's hidden space.
pub fn project(fused: &[f64], params: &PolicyParams) -> Result<Vec<f64>> {
    Ok(project_traced(fused, params)?.out)
}

/// Output projection including the low-rank delta, row-major `V × h`.
pub fn effective_output_weights(params: &PolicyParams) -> Vec<f64> {
    let l = params.layout();
    let mut w = params.segment(l.out_weight).to_vec();
    if let (Some(adapter), Some(sa), Some(sb)) = (params.config().adapter, l.adapter_a, l.adapter_b) {
        let a = params.segment(sa);
        let b = params.segment(sb);
        let (r, h) = (sa.rows, sa.cols);
        let scale = adapter.scale();
        for (v, row) in w.chunks_exact_mut(h).enumerate() {
            for k in 0..r {
                let bvk = b[v * r + k] * scale;
                if bvk != 0.0 {
                    for (wj, aj) in row.iter_mut().zip(&a[k * h..(k + 1) * h]) {
                        *wj += bvk * aj;
                    }
                }
            }
        }
    }
    w
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Stateful stepping through the recurrence with cached output weights.
struct Stepper<'a> {
    params: &'a PolicyParams,
    out_w: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a PolicyParams) -> Self {
        Self {
            params,
            out_w: effective_output_weights(params),
        }
    }

    fn step(&self, h: &[f64], token: usize) -> Vec<f64> {
        let l = self.params.layout();
        let e = self.params.config().embed_dim;
        let emb = &self.params.segment(l.embedding)[token * e..(token + 1) * e];
        let w = self.params.segment(l.rec_weight);
        let hd = h.len();
        let cols = hd + e;
        let mut z = self.params.segment(l.rec_bias).to_vec();
        for (i, zi) in z.iter_mut().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            let s: f64 = row[..hd].iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
                + row[hd..].iter().zip(emb).map(|(a, b)| a * b).sum::<f64>();
            *zi = (*zi + s).tanh();
        }
        z
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        let l = self.params.layout();
        let mut z = self.params.segment(l.out_bias).to_vec();
        matvec_add(&self.out_w, h, &mut z);
        z
    }

    fn initial_state(&self, ctx: &PromptContext) -> Result<(ProjectorTrace, Vec<f64>)> {
        let fused = fuse_checked(self.params, &ctx.feature_a, &ctx.feature_b)?;
        let trace = project_traced(&fused, self.params)?;
        let mut h = trace.out.clone();
        for &t in &ctx.prompt {
            h = self.step(&h, t);
        }
        Ok((trace, h))
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Per-token log-probabilities of `tokens` as an answer to `ctx`.
pub fn sequence_logprob(
    params: &PolicyParams,
    ctx: &PromptContext,
    tokens: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let v = params.config().vocab_size;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("answer token sequence is empty".into()));
    }
    check_tokens(&ctx.prompt, v)?;
    check_tokens(tokens, v)?;
    let stepper = Stepper::new(params);
    let (_, mut h) = stepper.initial_state(ctx)?;
    let mut per_token = Vec::with_capacity(tokens.len());
    for (j, &t) in tokens.iter().enumerate() {
        per_token.push(log_softmax(&stepper.logits(&h))[t]);
        if j + 1 < tokens.len() {
            h = stepper.step(&h, t);
        }
    }
    Ok((per_token.iter().sum(), per_token))
}

/// Full next-token distribution after `prefix`, as log-probabilities.
pub fn next_token_logprobs(
    params: &PolicyParams,
    ctx: &PromptContext,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let v = params.config().vocab_size;
    check_tokens(&ctx.prompt, v)?;
    check_tokens(prefix, v)?;
    let stepper = Stepper::new(params);
    let (_, mut h) = stepper.initial_state(ctx)?;
    for &t in prefix {
        h = stepper.step(&h, t);
    }
    Ok(log_softmax(&stepper.logits(&h)))
}

/// Adds `scale · ∇ log π(tokens | ctx)` into `grad` and returns the total
/// log-probability.
pub fn accumulate_logprob_gradient(
    params: &PolicyParams,
    ctx: &PromptContext,
    tokens: &[usize],
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let c = params.config();
    let l = params.layout();
    let (v, e, hd) = (c.vocab_size, c.embed_dim, c.hidden_dim);
    if grad.len() != l.total {
        return Err(Error::DimensionMismatch {
            what: "gradient buffer",
            expected: l.total,
            actual: grad.len(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("answer token sequence is empty".into()));
    }
    check_tokens(&ctx.prompt, v)?;
    check_tokens(tokens, v)?;

    let stepper = Stepper::new(params);
    let fused = fuse_checked(params, &ctx.feature_a, &ctx.feature_b)?;
    let proj = project_traced(&fused, params)?;

    // inputs[k] is the token consumed to go from states[k] to states[k + 1]
    let p = ctx.prompt.len();
    let inputs: Vec<usize> = ctx
        .prompt
        .iter()
        .chain(&tokens[..tokens.len() - 1])
        .copied()
        .collect();
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(proj.out.clone());
    for &t in &inputs {
        let next = stepper.step(states.last().unwrap(), t);
        states.push(next);
    }

    let mut d_out_w = vec![0.0; v * hd];
    let mut d_states: Vec<Vec<f64>> = vec![vec![0.0; hd]; states.len()];
    let mut total = 0.0;
    for (j, &t) in tokens.iter().enumerate() {
        let h = &states[p + j];
        let lsm = log_softmax(&stepper.logits(h));
        total += lsm[t];
        let mut g: Vec<f64> = lsm.iter().map(|x| -x.exp() * scale).collect();
        g[t] += scale;
        outer_add(&mut d_out_w, &g, h, 1.0);
        for (gb, gi) in grad[l.out_bias.range()].iter_mut().zip(&g) {
            *gb += gi;
        }
        matvec_t_add(&stepper.out_w, &g, &mut d_states[p + j]);
    }

    let w_rec = params.segment(l.rec_weight);
    let cols = hd + e;
    for k in (0..inputs.len()).rev() {
        let h_next = &states[k + 1];
        let dz: Vec<f64> = d_states[k + 1]
            .iter()
            .zip(h_next)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        let token = inputs[k];
        let emb_off = l.embedding.offset + token * e;
        {
            let h_prev = &states[k];
            let emb = &params.flat()[emb_off..emb_off + e];
            let gw = &mut grad[l.rec_weight.range()];
            for (i, &dzi) in dz.iter().enumerate() {
                if dzi == 0.0 {
                    continue;
                }
                let row = &mut gw[i * cols..(i + 1) * cols];
                for (r, hp) in row[..hd].iter_mut().zip(h_prev) {
                    *r += dzi * hp;
                }
                for (r, x) in row[hd..].iter_mut().zip(emb) {
                    *r += dzi * x;
                }
            }
        }
        for (gb, d) in grad[l.rec_bias.range()].iter_mut().zip(&dz) {
            *gb += d;
        }
        let dh_prev = &mut d_states[k];
        let mut demb = vec![0.0; e];
        for (i, &dzi) in dz.iter().enumerate() {
            if dzi == 0.0 {
                continue;
            }
            let row = &w_rec[i * cols..(i + 1) * cols];
            for (d, w) in dh_prev.iter_mut().zip(&row[..hd]) {
                *d += dzi * w;
            }
            for (d, w) in demb.iter_mut().zip(&row[hd..]) {
                *d += dzi * w;
            }
        }
        for (g, d) in grad[emb_off..emb_off + e].iter_mut().zip(&demb) {
            *g += d;
        }
    }

    projector_backward(params, &fused, &proj.hidden_act, &d_states[0], grad);

    // Output projection, split between base weights and adapter factors.
    for (g, d) in grad[l.out_weight.range()].iter_mut().zip(&d_out_w) {
        *g += d;
    }
    if let (Some(adapter), Some(sa), Some(sb)) = (c.adapter, l.adapter_a, l.adapter_b) {
        let r = sa.rows;
        let s = adapter.scale();
        let a = params.segment(sa);
        let b = params.segment(sb);
        // dB = s · dW · Aᵀ  (V × r),  d_a_factor = s · Bᵀ · dW  (r × h)
        let mut db = vec![0.0; v * r];
        let mut d_a_factor = vec![0.0; r * hd];
        for vi in 0..v {
            let dw_row = &d_out_w[vi * hd..(vi + 1) * hd];
            for k in 0..r {
                let a_row = &a[k * hd..(k + 1) * hd];
                db[vi * r + k] += s * dw_row.iter().zip(a_row).map(|(x, y)| x * y).sum::<f64>();
                let bvk = s * b[vi * r + k];
                if bvk != 0.0 {
                    for (d, w) in d_a_factor[k * hd..(k + 1) * hd].iter_mut().zip(dw_row) {
                        *d += bvk * w;
                    }
                }
            }
        }
        for (g, d) in grad[sa.range()].iter_mut().zip(&d_a_factor) {
            *g += d;
        }
        for (g, d) in grad[sb.range()].iter_mut().zip(&db) {
            *g += d;
        }
    }
    Ok(total)
}

/// Exact gradient of the total answer log-probability with respect to the
/// flat parameter vector.
pub fn logprob_gradient(
    params: &PolicyParams,
    ctx: &PromptContext,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    accumulate_logprob_gradient(params, ctx, tokens, 1.0, &mut grad)?;
    Ok(grad)
}

fn sample_index(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    // rounding left u marginally non-negative; fall back to the last
    // token with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn generate(
    stepper: &Stepper,
    start: &[f64],
    vocab: &Vocabulary,
    max_len: usize,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Rollout {
    let mut h = start.to_vec();
    let mut tokens = Vec::new();
    let mut per_token = Vec::new();
    for _ in 0..max_len {
        let logits = stepper.logits(&h);
        let t = choose(&logits);
        per_token.push(log_softmax(&logits)[t]);
        tokens.push(t);
        if t == EOS_ID {
            break;
        }
        h = stepper.step(&h, t);
    }
    Rollout {
        generated_text: vocab.decode(&tokens),
        total_logprob: per_token.iter().sum(),
        per_token_logprob: per_token,
        tokens,
    }
}

fn check_vocab(params: &PolicyParams, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() != params.config().vocab_size {
        return Err(Error::DimensionMismatch {
            what: "vocabulary size",
            expected: params.config().vocab_size,
            actual: vocab.len(),
        });
    }
    Ok(())
}

/// `n` independent ancestral samples at `temperature`. Recorded
/// log-probabilities are those of the untempered policy.
pub fn sample_candidates(
    params: &PolicyParams,
    vocab: &Vocabulary,
    ctx: &PromptContext,
    n: usize,
    temperature: f64,
    max_len: usize,
    rng_seed: u64,
) -> Result<Vec<Rollout>> {
    if n == 0 || max_len == 0 || !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling needs n >= 1, max_len >= 1, temperature > 0 (got {n}, {max_len}, {temperature})"
        )));
    }
    check_vocab(params, vocab)?;
    check_tokens(&ctx.prompt, vocab.len())?;
    let stepper = Stepper::new(params);
    let (_, h) = stepper.initial_state(ctx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n)
        .map(|_| generate(&stepper, &h, vocab, max_len, |z| sample_index(z, temperature, &mut rng)))
        .collect())
}

pub fn greedy_decode(
    params: &PolicyParams,
    vocab: &Vocabulary,
    ctx: &PromptContext,
    max_len: usize,
) -> Result<Rollout> {
    check_vocab(params, vocab)?;
    check_tokens(&ctx.prompt, vocab.len())?;
    let stepper = Stepper::new(params);
    let (_, h) = stepper.initial_state(ctx)?;
    Ok(generate(&stepper, &h, vocab, max_len, argmax))
}
