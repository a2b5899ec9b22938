//! Cross-module properties: batch invariance of the policy forward pass,
//! zero mismatch under equal profiles, loss-breakdown bookkeeping and task
//! scoring bounds.

use proptest::prelude::*;
use timlab::detkernels::{ExecutionProfile, PrecisionMode, ReductionOrder};
use timlab::policy::{forward_batch, grad_surrogate, init_params, PolicyConfig, ScoredSequence, Token};
use timlab::rlcore::{assemble_loss, LossConfig, HIST_BINS};
use timlab::rollout::{delta_stats, generate_batch, recompute_old, refresh_current, RolloutSettings};
use timlab::tasks::{gen_prompts, score, TaskKind, TaskSpec};

fn profile_strategy() -> impl Strategy<Value = ExecutionProfile> {
    let reduction = prop_oneof![
        Just(ReductionOrder::Sequential),
        Just(ReductionOrder::PairwiseTree),
        (1usize..9).prop_map(|b| ReductionOrder::Blocked { block_size: b }),
    ];
    let accum =
        prop_oneof![Just(PrecisionMode::Full64), Just(PrecisionMode::Full32), (4u32..=23).prop_map(|b| PrecisionMode::reduced(b).unwrap())];
    (reduction, 1usize..40, accum, any::<bool>()).prop_map(|(reduction, tile, accum, intermediate_rounding)| ExecutionProfile {
        reduction,
        tile,
        accum,
        intermediate_rounding,
        ..ExecutionProfile::exact()
    })
}

fn copy_spec() -> TaskSpec {
    TaskSpec { kind: TaskKind::CopyPattern, prompt_len: 4, target_len: 4 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_rows_do_not_depend_on_batch(p in profile_strategy(), seed in 0u64..1000, split in 1usize..17) {
        let cfg = PolicyConfig::default();
        let params = init_params(cfg, seed).unwrap();
        let contexts: Vec<Vec<Token>> = (0..16)
            .map(|i| (0..cfg.context_window).map(|j| ((seed as usize + 7 * i + 3 * j) % cfg.vocab_size) as Token).collect())
            .collect();
        let full = forward_batch(&params, &contexts, &p).unwrap();
        for (c, chunk) in contexts.chunks(split).enumerate() {
            let part = forward_batch(&params, chunk, &p).unwrap();
            for i in 0..chunk.len() {
                let a: Vec<u64> = part.row(i).iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = full.row(c * split + i).iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn equal_profiles_give_zero_delta(p in profile_strategy(), seed in 0u64..1000) {
        let cfg = PolicyConfig::default();
        let params = init_params(cfg, seed).unwrap();
        let prompts = gen_prompts(&copy_spec(), 4, seed, cfg.vocab_size, cfg.context_window).unwrap();
        let s = RolloutSettings { group_size: 4, max_len: 5, temperature: 1.0, seed };
        let mut batch = generate_batch(&params, &prompts, TaskKind::CopyPattern, &p, s).unwrap();
        recompute_old(&params, &mut batch, &p).unwrap();
        let d = delta_stats(&batch).unwrap();
        prop_assert_eq!(d.max_abs, 0.0);
        prop_assert!(d.per_token_delta.iter().all(|x| x.to_bits() == 0));
    }

    #[test]
    fn loss_bookkeeping(seed in 0u64..1000, name_idx in 0usize..10, tau_seq in prop_oneof![Just(f64::INFINITY), 1e-4f64..1.0]) {
        let names = ["reinforce", "grpo_recompute", "grpo_bypass", "tis", "srs", "tis_srs",
            "srs-k3-corr-ratio", "srs-k3-ppo-ratio", "tis-srs-k3-corr-ratio", "tis-srs-k1-corr-ratio"];
        let cfg = PolicyConfig::default();
        let params = init_params(cfg, seed).unwrap();
        let moved = init_params(cfg, seed + 1).unwrap();
        let prompts = gen_prompts(&copy_spec(), 4, seed, cfg.vocab_size, cfg.context_window).unwrap();
        let s = RolloutSettings { group_size: 4, max_len: 5, temperature: 1.0, seed };
        let mut batch = generate_batch(&params, &prompts, TaskKind::CopyPattern, &ExecutionProfile::variant(), s).unwrap();
        recompute_old(&params, &mut batch, &ExecutionProfile::exact()).unwrap();
        refresh_current(&moved, &mut batch, &ExecutionProfile::exact()).unwrap();
        for (i, t) in batch.trajectories.iter_mut().enumerate() {
            let a = (i as f64 - 7.5) / 4.0;
            t.tokens.iter_mut().for_each(|r| r.advantage = Some(a));
        }
        let loss = LossConfig { tau_seq, ..LossConfig::named(names[name_idx]).unwrap() };
        let b = assemble_loss(&batch.trajectories, &loss).unwrap();
        for rate in [b.clip_fraction, b.rejection_rate, b.tis_truncation_rate] {
            prop_assert!((0.0..=1.0).contains(&rate));
        }
        prop_assert_eq!(b.contribution_histogram.total(), b.num_tokens as u64);
        prop_assert_eq!(b.contribution_histogram.positive.len(), HIST_BINS + 2);
        prop_assert_eq!(b.num_tokens, batch.num_tokens());
        if tau_seq.is_infinite() {
            prop_assert_eq!(b.rejection_rate, 0.0);
        }
        prop_assert!(b.k3_mean >= 0.0);
    }

    #[test]
    fn gradient_is_linear_in_coefficients(seed in 0u64..1000, c in -4.0f64..4.0) {
        let cfg = PolicyConfig { vocab_size: 10, context_window: 4, embed_dim: 3, hidden_dim: 5, ..PolicyConfig::default() };
        let params = init_params(cfg, seed).unwrap();
        let prompt: Vec<Token> = vec![0, 4, 5, 3];
        let resp: Vec<Token> = vec![6, 7, 1];
        let base = [0.5, -1.0, 0.25];
        let scaled: Vec<f64> = base.iter().map(|x| x * c).collect();
        let (_, g1) = grad_surrogate(&params, &[ScoredSequence { prompt: &prompt, response: &resp, coeffs: &base }]).unwrap();
        let (_, gc) = grad_surrogate(&params, &[ScoredSequence { prompt: &prompt, response: &resp, coeffs: &scaled }]).unwrap();
        for (a, b) in g1.flat().iter().zip(gc.flat()) {
            prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn scores_are_bounded_and_answer_keys_score_one(seed in 0u64..1000, kind in prop_oneof![
        Just(TaskKind::CopyPattern), Just(TaskKind::Parity), (2u32..=10).prop_map(|base| TaskKind::Modsum { base })
    ], resp in proptest::collection::vec(0u32..32, 0..8)) {
        let spec = match kind {
            TaskKind::CopyPattern => copy_spec(),
            k => TaskSpec { kind: k, prompt_len: 5, target_len: 1 },
        };
        let cfg = PolicyConfig::default();
        for p in gen_prompts(&spec, 8, seed, cfg.vocab_size, cfg.context_window).unwrap() {
            let mut key = p.answer_key.clone();
            key.push(timlab::policy::EOS);
            prop_assert_eq!(score(kind, &p, &key), 1.0);
            let s = score(kind, &p, &resp);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
