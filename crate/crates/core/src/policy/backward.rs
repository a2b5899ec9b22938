use rayon::prelude::*;

use crate::detkernels::{log_softmax_row, ExecutionProfile};

use super::forward::{forward_cached, window};
use super::{Gradient, PolicyError, PolicyParams, Token};

/// One response whose token log-probabilities enter a surrogate with the
/// given constant weights.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSequence<'a> {
    pub prompt: &'a [Token],
    pub response: &'a [Token],
    pub coeffs: &'a [f64],
}

/// Value and gradient of `Σ_t coeff_t · log π_θ(a_t | s_t)`.
///
/// The coefficients are constants: any stop-gradient structure of an
/// objective is encoded in them by the caller. Backprop does not take a
/// profile: it always runs at full64 in sequential order, and per-sequence
/// gradients are summed in input order.
pub fn grad_surrogate(params: &PolicyParams, batch: &[ScoredSequence<'_>]) -> Result<(f64, Gradient), PolicyError> {
    let clean = ExecutionProfile::exact();
    let parts: Vec<Result<(f64, Gradient), PolicyError>> = batch.par_iter().map(|seq| sequence_gradient(params, seq, &clean)).collect();
    let mut total = Gradient::zeros_like(params);
    let mut value = 0.0;
    for part in parts {
        let (v, g) = part?;
        value += v;
        total.accumulate(&g);
    }
    Ok((value, total))
}

fn sequence_gradient(params: &PolicyParams, seq: &ScoredSequence<'_>, profile: &ExecutionProfile) -> Result<(f64, Gradient), PolicyError> {
    if seq.coeffs.len() != seq.response.len() {
        return Err(PolicyError::CoeffShape { expected: seq.response.len(), got: seq.coeffs.len() });
    }
    let mut grad = Gradient::zeros_like(params);
    if seq.response.is_empty() {
        return Ok((0.0, grad));
    }
    let cfg = params.config;
    let (k, e, h, v) = (cfg.context_window, cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
    let windows: Vec<Vec<Token>> = (0..seq.response.len()).map(|t| window(seq.prompt, &seq.response[..t], k)).collect();
    let cache = forward_cached(params, &windows, profile)?;

    let g = grad.as_params_mut();
    let mut logp = vec![0.0; v];
    let mut scratch = vec![0.0; v];
    let mut g_z = vec![0.0; v];
    let mut g_n = vec![0.0; h];
    let mut g_pre = vec![0.0; h];
    let mut g_x = vec![0.0; k * e];
    let mut value = 0.0;

    for (t, (&a, &c)) in seq.response.iter().zip(seq.coeffs).enumerate() {
        log_softmax_row(cache.logits.row(t), &mut logp, &mut scratch, profile)?;
        value += c * logp[a as usize];
        if c == 0.0 {
            continue;
        }
        // d log p_a / d z = onehot(a) - softmax(z)
        for (gz, &lp) in g_z.iter_mut().zip(&logp) {
            *gz = -c * lp.exp();
        }
        g_z[a as usize] += c;

        let normed = cache.normed.row(t);
        let act = cache.act.row(t);
        let rms = cache.rms[t];

        for (j, &nj) in normed.iter().enumerate() {
            let w2row = params.w2.row(j);
            let dw2 = g.w2.row_mut(j);
            let mut acc = 0.0;
            for ((d, &w), &gz) in dw2.iter_mut().zip(w2row).zip(&g_z) {
                *d += nj * gz;
                acc += w * gz;
            }
            g_n[j] = acc;
        }
        for (d, &gz) in g.b2.iter_mut().zip(&g_z) {
            *d += gz;
        }

        // rmsnorm: n_j = γ_j a_j / r, r = sqrt(mean(a²) + eps)
        let mut s = 0.0;
        for j in 0..h {
            g.gamma[j] += g_n[j] * act[j] / rms;
            s += params.gamma[j] * g_n[j] * act[j];
        }
        let r3h = rms * rms * rms * h as f64;
        for j in 0..h {
            let g_a = params.gamma[j] * g_n[j] / rms - act[j] * s / r3h;
            g_pre[j] = g_a * (1.0 - act[j] * act[j]);
        }
        for (d, &gp) in g.b1.iter_mut().zip(&g_pre) {
            *d += gp;
        }

        let x = cache.x.row(t);
        for (i, &xi) in x.iter().enumerate() {
            let w1row = params.w1.row(i);
            let dw1 = g.w1.row_mut(i);
            let mut acc = 0.0;
            for ((d, &w), &gp) in dw1.iter_mut().zip(w1row).zip(&g_pre) {
                *d += xi * gp;
                acc += w * gp;
            }
            g_x[i] = acc;
        }
        for (slot, &tok) in windows[t].iter().enumerate() {
            let demb = g.embedding.row_mut(tok as usize);
            for (d, &gx) in demb.iter_mut().zip(&g_x[slot * e..(slot + 1) * e]) {
                *d += gx;
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, sequence_logprobs, PolicyConfig, BOS};
    use crate::rng::RngStream;

    fn small_config() -> PolicyConfig {
        PolicyConfig { vocab_size: 9, context_window: 3, embed_dim: 4, hidden_dim: 5, rmsnorm_eps: 1e-6 }
    }

    /// Perturb a fresh init so gamma and biases are not at their symmetric
    /// initial values.
    fn random_params(seed: u64) -> PolicyParams {
        let mut p = init_params(small_config(), seed).unwrap();
        let mut rng = RngStream::new(seed, &[77]);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.between(-0.3, 0.3));
        }
        p
    }

    fn objective(p: &PolicyParams, prompt: &[Token], resp: &[Token], coeffs: &[f64]) -> f64 {
        let lp = sequence_logprobs(p, prompt, resp, &ExecutionProfile::exact()).unwrap();
        lp.iter().zip(coeffs).map(|(l, c)| l * c).sum()
    }

    /// Central differences over every parameter, compared component-wise.
    fn check_fd(p: &PolicyParams, prompt: &[Token], resp: &[Token], coeffs: &[f64]) {
        let seq = ScoredSequence { prompt, response: resp, coeffs };
        let (_, grad) = grad_surrogate(p, &[seq]).unwrap();
        let analytic = grad.flat();
        let step = 1e-5;
        let mut idx = 0;
        for ti in 0..6 {
            let len = p.tensors()[ti].1.len();
            for j in 0..len {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][j] += step;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][j] -= step;
                let fd = (objective(&plus, prompt, resp, coeffs) - objective(&minus, prompt, resp, coeffs)) / (2.0 * step);
                let an = analytic[idx];
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-8 || err / fd.abs().max(an.abs()) < 1e-4,
                    "tensor {} index {j}: fd {fd} analytic {an}",
                    p.tensors()[ti].0
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn single_token_matches_finite_differences() {
        let p = random_params(1);
        check_fd(&p, &[BOS, 4], &[5], &[1.0]);
    }

    #[test]
    fn multi_token_weighted_matches_finite_differences() {
        for seed in 2..5 {
            let p = random_params(seed);
            check_fd(&p, &[BOS, 4, 6], &[5, 7, 1], &[0.7, -1.3, 0.4]);
        }
    }

    #[test]
    fn zero_coeffs_zero_gradient() {
        let p = random_params(5);
        let resp = [5, 6];
        let seq = ScoredSequence { prompt: &[BOS], response: &resp, coeffs: &[0.0, 0.0] };
        let (v, g) = grad_surrogate(&p, &[seq]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_in_coeffs() {
        let p = random_params(6);
        let resp = [5, 6, 7];
        let c = [0.3, -0.2, 0.9];
        let c2: Vec<f64> = c.iter().map(|x| x * 4.0).collect();
        let (v1, g1) = grad_surrogate(&p, &[ScoredSequence { prompt: &[BOS], response: &resp, coeffs: &c }]).unwrap();
        let (v2, g2) = grad_surrogate(&p, &[ScoredSequence { prompt: &[BOS], response: &resp, coeffs: &c2 }]).unwrap();
        // scaling by a power of two commutes with every rounding step
        assert_eq!(v1 * 4.0, v2);
        let mut g1s = g1.clone();
        g1s.scale(4.0);
        assert_eq!(g1s, g2);
    }

    #[test]
    fn coeff_shape_checked() {
        let p = random_params(7);
        let seq = ScoredSequence { prompt: &[BOS], response: &[5, 6], coeffs: &[1.0] };
        assert!(matches!(grad_surrogate(&p, &[seq]), Err(PolicyError::CoeffShape { .. })));
    }

    #[test]
    fn value_is_weighted_logprob_sum() {
        let p = random_params(8);
        let resp = [5, 6];
        let c = [1.5, -0.5];
        let (v, _) = grad_surrogate(&p, &[ScoredSequence { prompt: &[BOS, 4], response: &resp, coeffs: &c }]).unwrap();
        assert!((v - objective(&p, &[BOS, 4], &resp, &c)).abs() < 1e-12);
    }
}
