use crate::detkernels::{log_softmax_row, matmul_bi, rmsnorm_row, ExecutionProfile, Matrix};
use crate::rng::RngStream;

use super::{PolicyError, PolicyParams, Token, EOS, PAD};

/// Intermediate activations of one batched forward pass.
pub(crate) struct ForwardCache {
    pub x: Matrix,
    pub act: Matrix,
    pub rms: Vec<f64>,
    pub normed: Matrix,
    pub logits: Matrix,
}

/// The last `k` tokens of `prompt ++ prefix`, left-padded with PAD.
pub fn window(prompt: &[Token], prefix: &[Token], k: usize) -> Vec<Token> {
    let total = prompt.len() + prefix.len();
    let mut w = Vec::with_capacity(k);
    if total < k {
        w.resize(k - total, PAD);
    }
    let skip = total.saturating_sub(k);
    w.extend(prompt.iter().chain(prefix).skip(skip).copied());
    w
}

fn check_context(params: &PolicyParams, context: &[Token]) -> Result<(), PolicyError> {
    let k = params.config.context_window;
    if context.len() > k {
        return Err(PolicyError::ContextTooLong { len: context.len(), window: k });
    }
    let vocab = params.config.vocab_size;
    if let Some(position) = context.iter().position(|&t| t as usize >= vocab) {
        return Err(PolicyError::TokenOutOfRange { token: context[position], position, vocab });
    }
    Ok(())
}

pub(crate) fn forward_cached(
    params: &PolicyParams,
    contexts: &[Vec<Token>],
    profile: &ExecutionProfile,
) -> Result<ForwardCache, PolicyError> {
    let cfg = &params.config;
    let (k, e, h) = (cfg.context_window, cfg.embed_dim, cfg.hidden_dim);
    let mut x = Matrix::zeros(contexts.len(), k * e);
    for (i, ctx) in contexts.iter().enumerate() {
        check_context(params, ctx)?;
        let padded: Vec<Token> = if ctx.len() < k { window(ctx, &[], k) } else { ctx.clone() };
        let row = x.row_mut(i);
        for (slot, &tok) in padded.iter().enumerate() {
            row[slot * e..(slot + 1) * e].copy_from_slice(params.embedding.row(tok as usize));
        }
    }

    let prec = profile.accum;
    let mut act = matmul_bi(&x, &params.w1, profile)?;
    for i in 0..act.rows() {
        for (v, &b) in act.row_mut(i).iter_mut().zip(&params.b1) {
            *v = profile.activation(prec.round(*v + b).tanh());
        }
    }

    let mut normed = Matrix::zeros(act.rows(), h);
    let mut rms = Vec::with_capacity(act.rows());
    let mut scratch = vec![0.0; h];
    for i in 0..act.rows() {
        let r = rmsnorm_row(act.row(i), &params.gamma, cfg.rmsnorm_eps, normed.row_mut(i), &mut scratch, profile)
            .map_err(|e| e.offset_index(i * h))?;
        rms.push(r);
        normed.row_mut(i).iter_mut().for_each(|v| *v = profile.activation(*v));
    }

    let mut logits = matmul_bi(&normed, &params.w2, profile)?;
    for i in 0..logits.rows() {
        for (v, &b) in logits.row_mut(i).iter_mut().zip(&params.b2) {
            *v = profile.activation(prec.round(*v + b));
        }
    }
    Ok(ForwardCache { x, act, rms, normed, logits })
}

/// Logits for a batch of contexts, one row each.
pub fn forward_batch(params: &PolicyParams, contexts: &[Vec<Token>], profile: &ExecutionProfile) -> Result<Matrix, PolicyError> {
    Ok(forward_cached(params, contexts, profile)?.logits)
}

/// Next-token logits for one context (left-padded to the window).
pub fn forward_logits(params: &PolicyParams, context: &[Token], profile: &ExecutionProfile) -> Result<Vec<f64>, PolicyError> {
    Ok(forward_batch(params, &[context.to_vec()], profile)?.into_data())
}

fn response_windows(params: &PolicyParams, prompt: &[Token], response: &[Token]) -> Result<Vec<Vec<Token>>, PolicyError> {
    let vocab = params.config.vocab_size;
    if let Some(position) = response.iter().position(|&t| t as usize >= vocab) {
        return Err(PolicyError::TokenOutOfRange { token: response[position], position, vocab });
    }
    let k = params.config.context_window;
    Ok((0..response.len()).map(|t| window(prompt, &response[..t], k)).collect())
}

/// `log π(a_t | s_t)` for every response token.
pub fn sequence_logprobs(
    params: &PolicyParams,
    prompt: &[Token],
    response: &[Token],
    profile: &ExecutionProfile,
) -> Result<Vec<f64>, PolicyError> {
    if response.is_empty() {
        return Err(PolicyError::EmptyResponse);
    }
    let windows = response_windows(params, prompt, response)?;
    let logits = forward_batch(params, &windows, profile)?;
    let v = params.config.vocab_size;
    let mut row = vec![0.0; v];
    let mut scratch = vec![0.0; v];
    let mut out = Vec::with_capacity(response.len());
    for (t, &a) in response.iter().enumerate() {
        log_softmax_row(logits.row(t), &mut row, &mut scratch, profile)?;
        out.push(row[a as usize]);
    }
    Ok(out)
}

/// A sampled response with the sampling engine's log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<Token>,
    pub logp: Vec<f64>,
}

/// Ancestral sampling by inverse CDF until EOS or `max_len`.
///
/// `logp` records the temperature-1 log-probability of each emitted token
/// under `profile`; the temperature only shapes the sampling distribution.
pub fn sample_response(
    params: &PolicyParams,
    prompt: &[Token],
    profile: &ExecutionProfile,
    rng: &mut RngStream,
    max_len: usize,
    temperature: f64,
) -> Result<Sample, PolicyError> {
    if max_len == 0 {
        return Err(PolicyError::InvalidMaxLen);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    let v = params.config.vocab_size;
    let k = params.config.context_window;
    let mut tokens = Vec::with_capacity(max_len);
    let mut logp = Vec::with_capacity(max_len);
    let mut row = vec![0.0; v];
    let mut sample_row = vec![0.0; v];
    let mut scratch = vec![0.0; v];
    while tokens.len() < max_len {
        let ctx = window(prompt, &tokens, k);
        let logits = forward_logits(params, &ctx, profile)?;
        log_softmax_row(&logits, &mut row, &mut scratch, profile)?;
        let dist = if temperature == 1.0 {
            &row
        } else {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            log_softmax_row(&scaled, &mut sample_row, &mut scratch, profile)?;
            &sample_row
        };
        let a = inverse_cdf(dist, rng.uniform());
        tokens.push(a);
        logp.push(row[a as usize]);
        if a == EOS {
            break;
        }
    }
    Ok(Sample { tokens, logp })
}

// The row's probabilities need not sum to exactly 1 under a reduced
// profile; the draw is scaled by their total so the shortfall or excess is
// spread over the whole row instead of landing on one end of it.
fn inverse_cdf(logp: &[f64], u: f64) -> Token {
    let probs = logp.iter().map(|lp| lp.exp());
    let total: f64 = probs.clone().sum();
    let target = u * total;
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (j, p) in probs.enumerate() {
        if p > 0.0 {
            last_nonzero = j;
        }
        cum += p;
        if target < cum {
            return j as Token;
        }
    }
    last_nonzero as Token
}

/// Argmax decoding (lowest index on ties) until EOS or `max_len`.
pub fn greedy_response(
    params: &PolicyParams,
    prompt: &[Token],
    profile: &ExecutionProfile,
    max_len: usize,
) -> Result<Vec<Token>, PolicyError> {
    if max_len == 0 {
        return Err(PolicyError::InvalidMaxLen);
    }
    let k = params.config.context_window;
    let mut tokens = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let logits = forward_logits(params, &window(prompt, &tokens, k), profile)?;
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        tokens.push(best as Token);
        if best as Token == EOS {
            break;
        }
    }
    Ok(tokens)
}
