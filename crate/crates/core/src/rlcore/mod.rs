//! Ratios, KL estimators, advantages and the clipped surrogate objectives.

mod loss;

use serde::{Deserialize, Serialize};

pub use loss::{assemble_loss, ContributionHistogram, LossBreakdown, HIST_BINS, HIST_EDGE};

/// Guard added to standard deviations before whitening.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RlError {
    #[error("ratio must be positive and finite, got {0}")]
    InvalidRatio(f64),
    #[error("log-probability must be finite and <= 0, got {0}")]
    InvalidLogprob(f64),
    #[error("{variant} requires {field} on trajectory {index} token {position}")]
    MissingField { variant: &'static str, field: &'static str, index: usize, position: usize },
    #[error("batch whitening needs at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("{n} rewards do not form groups of {group}")]
    RaggedGroups { n: usize, group: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("sequence score needs at least one token")]
    EmptySequence,
}

/// `(r_train, r_rollout, r_corr)` for one token; `r_rollout = r_train · r_corr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioTriple {
    pub r_train: f64,
    pub r_rollout: f64,
    pub r_corr: f64,
}

fn check_logp(x: f64) -> Result<f64, RlError> {
    if x.is_finite() && x <= 0.0 {
        Ok(x)
    } else {
        Err(RlError::InvalidLogprob(x))
    }
}

/// PPO ratios against both denominators plus the correction ratio.
pub fn ratio_triple(logp_cur: f64, logp_old_train: f64, logp_old_rollout: f64) -> Result<RatioTriple, RlError> {
    let (cur, old, roll) = (check_logp(logp_cur)?, check_logp(logp_old_train)?, check_logp(logp_old_rollout)?);
    Ok(RatioTriple { r_train: (cur - old).exp(), r_rollout: (cur - roll).exp(), r_corr: (old - roll).exp() })
}

fn check_ratio(r: f64) -> Result<f64, RlError> {
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(RlError::InvalidRatio(r))
    }
}

/// `K1(r) = −log r`.
pub fn k1(r: f64) -> Result<f64, RlError> {
    Ok(-check_ratio(r)?.ln())
}

/// `K3(r) = (r − 1) − log r`, never negative.
pub fn k3(r: f64) -> Result<f64, RlError> {
    let r = check_ratio(r)?;
    Ok(((r - 1.0) - r.ln()).max(0.0))
}

/// `C(r, A) = −(r − 1)·A`.
pub fn centered_contribution(r: f64, a: f64) -> f64 {
    -(r - 1.0) * a
}

/// Clipped token surrogate `−min(rA, clip(r, 1−ε, 1+ε)·A)`.
///
/// `clipped` is true when the clipped branch is the strict minimizer, which
/// is exactly when the token contributes no gradient.
pub fn ppo_token_loss(r: f64, a: f64, eps: f64) -> Result<(f64, bool), RlError> {
    let r = check_ratio(r)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(RlError::InvalidConfig(format!("clip epsilon must be positive, got {eps}")));
    }
    let unclipped = r * a;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
    if clipped < unclipped {
        Ok((-clipped, true))
    } else {
        Ok((-unclipped, false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    K1,
    K3,
}

impl Estimator {
    pub fn eval(self, r: f64) -> Result<f64, RlError> {
        match self {
            Estimator::K1 => k1(r),
            Estimator::K3 => k3(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqAgg {
    Sum,
    Mean,
}

/// `S_seq = Σ_t K(q_t)`, divided by `T` under [`SeqAgg::Mean`].
pub fn seq_score(q: &[f64], estimator: Estimator, agg: SeqAgg) -> Result<f64, RlError> {
    if q.is_empty() {
        return Err(RlError::EmptySequence);
    }
    let mut s = 0.0;
    for &x in q {
        s += estimator.eval(x)?;
    }
    Ok(match agg {
        SeqAgg::Sum => s,
        SeqAgg::Mean => s / q.len() as f64,
    })
}

fn whiten(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + STD_GUARD;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Whitening over the whole batch with the population standard deviation.
pub fn adv_batch_whiten(rewards: &[f64]) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::TooFewTrajectories(rewards.len()));
    }
    Ok(whiten(rewards))
}

/// Whitening within consecutive groups of `group` rewards.
pub fn adv_grpo(rewards: &[f64], group: usize) -> Result<Vec<f64>, RlError> {
    if group < 2 || rewards.is_empty() || rewards.len() % group != 0 {
        return Err(RlError::RaggedGroups { n: rewards.len(), group });
    }
    Ok(rewards.chunks(group).flat_map(whiten).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single policy-gradient step, no ratio.
    Reinforce,
    /// Clipped surrogate against the trainer's old log-probabilities.
    GrpoRecompute,
    /// Clipped surrogate against the rollout log-probabilities.
    GrpoBypass,
    /// Recompute surrogate weighted by `min(r_corr, τ_tok)`.
    Tis,
    /// Bypass surrogate with sequence-level rejection.
    Srs,
    /// Truncated recompute surrogate with sequence-level rejection.
    TisSrs,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Reinforce => "reinforce",
            Variant::GrpoRecompute => "grpo_recompute",
            Variant::GrpoBypass => "grpo_bypass",
            Variant::Tis => "tis",
            Variant::Srs => "srs",
            Variant::TisSrs => "tis_srs",
        }
    }

    pub fn masks(self) -> bool {
        matches!(self, Variant::Srs | Variant::TisSrs)
    }

    pub fn truncates(self) -> bool {
        matches!(self, Variant::Tis | Variant::TisSrs)
    }

    /// Whether the PPO ratio is taken against the trainer's old
    /// log-probabilities rather than the rollout ones.
    pub fn uses_train_denominator(self) -> bool {
        matches!(self, Variant::GrpoRecompute | Variant::Tis | Variant::TisSrs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSignal {
    /// `q_t = r_corr`, pure system mismatch.
    CorrRatio,
    /// `q_t` = the variant's PPO ratio, which also moves with the policy.
    PpoRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    BatchWhiten,
    GrpoGroup,
}

fn default_eps() -> f64 {
    0.2
}
fn default_tau_tok() -> f64 {
    2.0
}
fn default_tau_seq() -> f64 {
    0.001
}
fn default_estimator() -> Estimator {
    Estimator::K3
}
fn default_mask() -> MaskSignal {
    MaskSignal::CorrRatio
}
fn default_agg() -> SeqAgg {
    SeqAgg::Mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    #[serde(default = "default_eps")]
    pub clip_eps: f64,
    #[serde(default = "default_tau_tok")]
    pub tau_tok: f64,
    /// May be `inf`, which disables rejection.
    #[serde(default = "default_tau_seq")]
    pub tau_seq: f64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_mask")]
    pub mask_signal: MaskSignal,
    #[serde(default = "default_agg")]
    pub seq_agg: SeqAgg,
    /// Defaults to group whitening for the clipped variants and batch
    /// whitening for REINFORCE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_mode: Option<AdvMode>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::new(Variant::GrpoRecompute)
    }
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        LossConfig {
            variant,
            clip_eps: default_eps(),
            tau_tok: default_tau_tok(),
            tau_seq: default_tau_seq(),
            estimator: default_estimator(),
            mask_signal: default_mask(),
            seq_agg: default_agg(),
            adv_mode: None,
        }
    }

    /// The four named correction configurations plus the plain variant
    /// names.
    pub fn named(name: &str) -> Option<Self> {
        let with = |v, est, mask| LossConfig { estimator: est, mask_signal: mask, ..LossConfig::new(v) };
        Some(match name {
            "srs-k3-corr-ratio" => with(Variant::Srs, Estimator::K3, MaskSignal::CorrRatio),
            "srs-k3-ppo-ratio" => with(Variant::Srs, Estimator::K3, MaskSignal::PpoRatio),
            "tis-srs-k3-corr-ratio" => with(Variant::TisSrs, Estimator::K3, MaskSignal::CorrRatio),
            "tis-srs-k1-corr-ratio" => with(Variant::TisSrs, Estimator::K1, MaskSignal::CorrRatio),
            "reinforce" => LossConfig::new(Variant::Reinforce),
            "grpo_recompute" | "grpo-recompute" => LossConfig::new(Variant::GrpoRecompute),
            "grpo_bypass" | "grpo-bypass" => LossConfig::new(Variant::GrpoBypass),
            "tis" => LossConfig::new(Variant::Tis),
            "srs" => LossConfig::new(Variant::Srs),
            "tis_srs" | "tis-srs" => LossConfig::new(Variant::TisSrs),
            _ => return None,
        })
    }

    /// Whether the loss reads `logp_old_train`.
    pub fn needs_old_train(&self) -> bool {
        let v = self.variant;
        v.uses_train_denominator() || v.truncates() || (v.masks() && self.mask_signal == MaskSignal::CorrRatio)
    }

    pub fn adv_mode(&self) -> AdvMode {
        self.adv_mode.unwrap_or(match self.variant {
            Variant::Reinforce => AdvMode::BatchWhiten,
            _ => AdvMode::GrpoGroup,
        })
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: String| Err(RlError::InvalidConfig(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.tau_tok > 0.0) || self.tau_tok.is_nan() {
            return bad(format!("tau_tok must be positive, got {}", self.tau_tok));
        }
        if !(self.tau_seq > 0.0) || self.tau_seq.is_nan() {
            return bad(format!("tau_seq must be positive, got {}", self.tau_seq));
        }
        if self.variant == Variant::Reinforce && self.adv_mode == Some(AdvMode::GrpoGroup) {
            return bad("reinforce runs with one sample per prompt; use batch_whiten".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ratio_examples() {
        let t = ratio_triple(-0.7, -0.7, -0.7).unwrap();
        assert_eq!((t.r_train, t.r_rollout, t.r_corr), (1.0, 1.0, 1.0));
        let t = ratio_triple(-1.0, -1.0, -1.2).unwrap();
        assert_eq!(t.r_train, 1.0);
        let e02 = 0.2f64.exp();
        assert!((t.r_rollout - e02).abs() < 1e-12 && (t.r_corr - e02).abs() < 1e-12);
        assert!((e02 - 1.2214).abs() < 1e-4);
        assert!(ratio_triple(0.1, -1.0, -1.0).is_err());
        assert!(ratio_triple(f64::NAN, -1.0, -1.0).is_err());
    }

    #[test]
    fn estimator_examples() {
        assert_eq!(k1(1.0).unwrap(), 0.0);
        assert_eq!(k3(1.0).unwrap(), 0.0);
        assert!((k3(2.0).unwrap() - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((k3(2.0).unwrap() - 0.30685).abs() < 1e-5);
        assert!((k1(std::f64::consts::E).unwrap() + 1.0).abs() < 1e-15);
        assert!(k1(0.0).is_err() && k3(-1.0).is_err());
    }

    #[test]
    fn contribution_examples() {
        assert_eq!(centered_contribution(1.0, 3.7), 0.0);
        assert_eq!(centered_contribution(1.5, 2.0), -1.0);
        assert_eq!(centered_contribution(0.5, -2.0), -1.0);
    }

    #[test]
    fn ppo_examples() {
        assert_eq!(ppo_token_loss(1.0, 0.8, 0.2).unwrap(), (-0.8, false));
        assert_eq!(ppo_token_loss(1.5, 1.0, 0.2).unwrap(), (-1.2, true));
        assert_eq!(ppo_token_loss(0.5, -1.0, 0.2).unwrap(), (0.8, true));
        // outside the range but the unclipped branch is smaller
        assert_eq!(ppo_token_loss(0.5, 1.0, 0.2).unwrap(), (-0.5, false));
        assert_eq!(ppo_token_loss(1.5, 0.0, 0.2).unwrap().1, false);
        assert!(ppo_token_loss(0.0, 1.0, 0.2).is_err());
        assert!(ppo_token_loss(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn whitening_examples() {
        assert_eq!(adv_batch_whiten(&[0.3; 5]).unwrap(), vec![0.0; 5]);
        let a = adv_batch_whiten(&[0.0, 1.0]).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        assert!(matches!(adv_batch_whiten(&[1.0]), Err(RlError::TooFewTrajectories(1))));
        let g = adv_grpo(&[0.0, 0.0, 1.0, 1.0], 4).unwrap();
        for (x, want) in g.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((x - want).abs() < 1e-7);
        }
        assert_eq!(adv_grpo(&[0.5; 8], 4).unwrap(), vec![0.0; 8]);
        assert!(adv_grpo(&[0.0; 7], 4).is_err());
        assert!(adv_grpo(&[0.0; 4], 1).is_err());
    }

    #[test]
    fn seq_score_examples() {
        assert_eq!(seq_score(&[1.0; 4], Estimator::K3, SeqAgg::Sum).unwrap(), 0.0);
        assert_eq!(seq_score(&[1.0; 4], Estimator::K1, SeqAgg::Mean).unwrap(), 0.0);
        let s = seq_score(&[2.0, 2.0], Estimator::K3, SeqAgg::Sum).unwrap();
        assert!((s - 2.0 * (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((s - 0.6137).abs() < 1e-4);
        assert!(seq_score(&[1.0, 0.0], Estimator::K3, SeqAgg::Sum).is_err());
        assert!(seq_score(&[], Estimator::K3, SeqAgg::Sum).is_err());
    }

    #[test]
    fn k1_cancels_where_k3_does_not() {
        let q = [2.0, 0.5, 3.0, 1.0 / 3.0];
        assert!(seq_score(&q, Estimator::K1, SeqAgg::Mean).unwrap().abs() < 1e-15);
        assert!(seq_score(&q, Estimator::K3, SeqAgg::Mean).unwrap() > 0.1);
    }

    #[test]
    fn named_configs() {
        let c = LossConfig::named("srs-k3-ppo-ratio").unwrap();
        assert_eq!((c.variant, c.estimator, c.mask_signal), (Variant::Srs, Estimator::K3, MaskSignal::PpoRatio));
        let c = LossConfig::named("tis-srs-k1-corr-ratio").unwrap();
        assert_eq!((c.variant, c.estimator), (Variant::TisSrs, Estimator::K1));
        assert_eq!((c.tau_tok, c.tau_seq, c.clip_eps), (2.0, 0.001, 0.2));
        assert!(LossConfig::named("dapo").is_none());
        assert_eq!(LossConfig::new(Variant::Reinforce).adv_mode(), AdvMode::BatchWhiten);
        assert_eq!(LossConfig::new(Variant::Tis).adv_mode(), AdvMode::GrpoGroup);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { clip_eps: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { tau_seq: -1.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { tau_seq: f64::INFINITY, ..LossConfig::default() }.validate().is_ok());
        let r = LossConfig { adv_mode: Some(AdvMode::GrpoGroup), ..LossConfig::new(Variant::Reinforce) };
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn ratio_identity(cur in -20.0f64..0.0, old in -20.0f64..0.0, roll in -20.0f64..0.0) {
            let t = ratio_triple(cur, old, roll).unwrap();
            let prod = t.r_train * t.r_corr;
            prop_assert!((t.r_rollout - prod).abs() <= 1e-12 * t.r_rollout.abs().max(prod.abs()));
        }

        #[test]
        fn k3_non_negative(log_r in -7.0f64..7.0) {
            let r = 10f64.powf(log_r / 2.3);
            prop_assert!(k3(r).unwrap() >= 0.0);
        }

        #[test]
        fn seq_mean_is_sum_over_len(q in proptest::collection::vec(0.01f64..5.0, 1..40)) {
            let s = seq_score(&q, Estimator::K3, SeqAgg::Sum).unwrap();
            let m = seq_score(&q, Estimator::K3, SeqAgg::Mean).unwrap();
            prop_assert!((m - s / q.len() as f64).abs() <= 1e-15 * s.abs().max(1.0));
        }

        #[test]
        fn whitened_mean_is_zero(r in proptest::collection::vec(0.0f64..1.0, 2..64)) {
            let a = adv_batch_whiten(&r).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() / (a.len() as f64) < 1e-12);
        }

        #[test]
        fn group_means_are_zero(r in proptest::collection::vec(0.0f64..1.0, 8..=8), extra in proptest::collection::vec(0.0f64..1.0, 8..=8)) {
            let all: Vec<f64> = r.into_iter().chain(extra).collect();
            let a = adv_grpo(&all, 8).unwrap();
            for g in a.chunks(8) {
                prop_assert!(g.iter().sum::<f64>().abs() / 8.0 < 1e-12);
            }
        }
    }
}
