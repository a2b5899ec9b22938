use serde::{Deserialize, Serialize};

use super::{centered_contribution, k1, k3, ppo_token_loss, seq_score, LossConfig, MaskSignal, RlError, Variant};
use crate::rollout::Trajectory;

/// Number of regular histogram bins over `[-HIST_EDGE, HIST_EDGE)`.
pub const HIST_BINS: usize = 20;
pub const HIST_EDGE: f64 = 1.0;

/// Counts of `C(r, A)` by sign of the advantage. Each count vector holds an
/// underflow bin, `HIST_BINS` regular bins and an overflow bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContributionHistogram {
    pub positive: Vec<u64>,
    pub negative: Vec<u64>,
    pub zero: Vec<u64>,
}

impl Default for ContributionHistogram {
    fn default() -> Self {
        let empty = vec![0; HIST_BINS + 2];
        ContributionHistogram { positive: empty.clone(), negative: empty.clone(), zero: empty }
    }
}

impl ContributionHistogram {
    /// Lower edges of the regular bins.
    pub fn edges() -> Vec<f64> {
        (0..=HIST_BINS).map(|i| -HIST_EDGE + 2.0 * HIST_EDGE * i as f64 / HIST_BINS as f64).collect()
    }

    pub fn bin(c: f64) -> usize {
        if c < -HIST_EDGE {
            0
        } else if c >= HIST_EDGE {
            HIST_BINS + 1
        } else {
            let i = ((c + HIST_EDGE) / (2.0 * HIST_EDGE) * HIST_BINS as f64).floor() as usize;
            1 + i.min(HIST_BINS - 1)
        }
    }

    pub fn add(&mut self, c: f64, advantage: f64) {
        let b = Self::bin(c);
        if advantage > 0.0 {
            self.positive[b] += 1;
        } else if advantage < 0.0 {
            self.negative[b] += 1;
        } else {
            self.zero[b] += 1;
        }
    }

    pub fn merge(&mut self, other: &ContributionHistogram) {
        for (dst, src) in [(&mut self.positive, &other.positive), (&mut self.negative, &other.negative), (&mut self.zero, &other.zero)] {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn total(&self) -> u64 {
        self.positive.iter().chain(&self.negative).chain(&self.zero).sum()
    }
}

/// Loss value, gradient coefficients and diagnostics for one set of
/// trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// Per trajectory, per token: the constant multiplying
    /// `∇ log π_θ(a_t | s_t)` in the gradient of `loss`.
    pub token_coeffs: Vec<Vec<f64>>,
    pub rejected: Vec<bool>,
    pub clip_fraction: f64,
    pub rejection_rate: f64,
    pub tis_truncation_rate: f64,
    pub k1_mean: f64,
    pub k3_mean: f64,
    pub contribution_histogram: ContributionHistogram,
    pub num_tokens: usize,
    /// Tokens in trajectories that were not rejected.
    pub num_accepted_tokens: usize,
    pub num_clipped: usize,
    pub num_truncated: usize,
    pub k1_sum: f64,
    pub k3_sum: f64,
}

struct TokenView {
    cur: f64,
    rollout: f64,
    old: Option<f64>,
    adv: f64,
}

fn views(trajs: &[Trajectory], cfg: &LossConfig) -> Result<Vec<Vec<TokenView>>, RlError> {
    let variant = cfg.variant.name();
    let need_old = cfg.needs_old_train();
    trajs
        .iter()
        .enumerate()
        .map(|(index, t)| {
            t.tokens
                .iter()
                .enumerate()
                .map(|(position, r)| {
                    let missing = |field| RlError::MissingField { variant, field, index, position };
                    let cur = r.logp_cur.ok_or_else(|| missing("logp_cur"))?;
                    let adv = r.advantage.ok_or_else(|| missing("advantage"))?;
                    let old = if need_old { Some(r.logp_old_train.ok_or_else(|| missing("logp_old_train"))?) } else { r.logp_old_train };
                    Ok(TokenView { cur, rollout: r.logp_rollout, old, adv })
                })
                .collect()
        })
        .collect()
}

/// Assembles the variant's batch loss.
///
/// The sequence loss is the sum of its token terms and the batch loss
/// averages it over trajectories that were not rejected. Old
/// log-probabilities, correction weights, clip-branch selection and the
/// rejection mask are all constants for the gradient.
pub fn assemble_loss(trajs: &[Trajectory], cfg: &LossConfig) -> Result<LossBreakdown, RlError> {
    cfg.validate()?;
    let v = cfg.variant;
    let tokens = views(trajs, cfg)?;

    // ratio against the variant's old-policy denominator
    let ppo_ratio = |tv: &TokenView| -> f64 {
        let denom = if v.uses_train_denominator() { tv.old.expect("checked") } else { tv.rollout };
        (tv.cur - denom).exp()
    };
    let corr = |tv: &TokenView| tv.old.map(|o| (o - tv.rollout).exp());

    let mut rejected = Vec::with_capacity(trajs.len());
    for seq in &tokens {
        if !v.masks() || seq.is_empty() {
            rejected.push(false);
            continue;
        }
        let q: Vec<f64> = match cfg.mask_signal {
            MaskSignal::CorrRatio => seq.iter().map(|tv| corr(tv).expect("checked")).collect(),
            MaskSignal::PpoRatio => seq.iter().map(ppo_ratio).collect(),
        };
        let s = seq_score(&q, cfg.estimator, cfg.seq_agg)?;
        rejected.push(!(s <= cfg.tau_seq));
    }
    let n_accepted = rejected.iter().filter(|r| !**r).count();
    let inv_n = if n_accepted == 0 { 0.0 } else { 1.0 / n_accepted as f64 };

    let mut hist = ContributionHistogram::default();
    let mut token_coeffs = Vec::with_capacity(trajs.len());
    let (mut loss_sum, mut k1_sum, mut k3_sum) = (0.0, 0.0, 0.0);
    let (mut num_tokens, mut accepted_tokens, mut clipped, mut truncated) = (0usize, 0usize, 0usize, 0usize);

    for (seq, &rej) in tokens.iter().zip(&rejected) {
        let mut coeffs = Vec::with_capacity(seq.len());
        let mut seq_loss = 0.0;
        for tv in seq {
            let r = ppo_ratio(tv);
            k1_sum += k1(r)?;
            k3_sum += k3(r)?;
            hist.add(centered_contribution(r, tv.adv), tv.adv);
            num_tokens += 1;

            let w = if v.truncates() {
                let rc = corr(tv).expect("checked");
                if rc > cfg.tau_tok {
                    truncated += 1;
                }
                rc.min(cfg.tau_tok)
            } else {
                1.0
            };
            let (term, coeff) = if v == Variant::Reinforce {
                (-tv.adv * tv.cur, -tv.adv)
            } else {
                let (l, is_clipped) = ppo_token_loss(r, tv.adv, cfg.clip_eps)?;
                if is_clipped && !rej {
                    clipped += 1;
                }
                (w * l, if is_clipped { 0.0 } else { -w * tv.adv * r })
            };
            if rej {
                coeffs.push(0.0);
            } else {
                accepted_tokens += 1;
                seq_loss += term;
                coeffs.push(coeff * inv_n);
            }
        }
        if !rej {
            loss_sum += seq_loss;
        }
        token_coeffs.push(coeffs);
    }

    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(LossBreakdown {
        loss: loss_sum * inv_n,
        token_coeffs,
        clip_fraction: frac(clipped, accepted_tokens),
        rejection_rate: frac(trajs.len() - n_accepted, trajs.len()),
        tis_truncation_rate: frac(truncated, num_tokens),
        k1_mean: frac(1, num_tokens) * k1_sum,
        k3_mean: frac(1, num_tokens) * k3_sum,
        rejected,
        contribution_histogram: hist,
        num_tokens,
        num_accepted_tokens: accepted_tokens,
        num_clipped: clipped,
        num_truncated: truncated,
        k1_sum,
        k3_sum,
    })
}
