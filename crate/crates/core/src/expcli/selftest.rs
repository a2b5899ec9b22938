//! `selftest`: the kernel and objective contracts, run end to end.

use std::time::Instant;

use crate::detkernels::{ExecutionProfile, KernelFault, PrecisionMode, ReductionOrder};
use crate::policy::{forward_batch, grad_surrogate, init_params, sequence_logprobs, PolicyConfig, PolicyParams, ScoredSequence, Token};
use crate::rlcore::{assemble_loss, k1, k3, ratio_triple, LossConfig};
use crate::rng::RngStream;
use crate::rollout::{generate_batch, recompute_old, refresh_current, RolloutSettings, Trajectory};
use crate::tasks::{gen_prompts, TaskSpec};
use crate::trainer::{run_experiment, MetricsRecord, TrainConfig};

pub const CONTRACTS: [&str; 5] = ["batch_invariance", "determinism", "gradient_check", "ratio_identity", "zero_mismatch"];

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Kernel fault injected into every profile the suites use.
    pub fault: KernelFault,
}

#[derive(Debug, Clone)]
pub struct ContractResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub millis: u128,
}

fn profiles(fault: KernelFault) -> Vec<ExecutionProfile> {
    let mut v = vec![
        ExecutionProfile::exact(),
        ExecutionProfile::variant(),
        ExecutionProfile::preset("bf16").expect("preset"),
        ExecutionProfile::preset("fp32").expect("preset"),
        ExecutionProfile {
            reduction: ReductionOrder::Blocked { block_size: 3 },
            tile: 5,
            accum: PrecisionMode::EmulatedReduced { mantissa_bits: 10 },
            ..ExecutionProfile::exact()
        },
    ];
    for p in &mut v {
        p.fault = fault;
    }
    v
}

fn small_policy() -> PolicyConfig {
    PolicyConfig { vocab_size: 12, context_window: 5, embed_dim: 4, hidden_dim: 6, ..PolicyConfig::default() }
}

fn batch_invariance(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = PolicyConfig::default();
    let params = init_params(cfg, 7).map_err(|e| e.to_string())?;
    let mut rng = RngStream::new(7, &[1]);
    let contexts: Vec<Vec<Token>> =
        (0..64).map(|_| (0..cfg.context_window).map(|_| rng.below(cfg.vocab_size as u64) as Token).collect()).collect();
    let mut checked = 0;
    for p in profiles(opts.fault) {
        let full = forward_batch(&params, &contexts, &p).map_err(|e| e.to_string())?;
        for size in [1, 2, 4, 8] {
            for (c, chunk) in contexts.chunks(size).enumerate() {
                let part = forward_batch(&params, chunk, &p).map_err(|e| e.to_string())?;
                for i in 0..chunk.len() {
                    let row = c * size + i;
                    let same = part.row(i).iter().zip(full.row(row)).all(|(a, b)| a.to_bits() == b.to_bits());
                    if !same {
                        return Err(format!("row {row} differs between batch {size} and batch 64 under {p:?}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} rows bitwise equal"))
}

fn tiny_run(loss: &str, profile: ExecutionProfile, steps: u64) -> TrainConfig {
    TrainConfig {
        loss: LossConfig::named(loss).expect("named loss"),
        rollout_profile: profile,
        train_profile: profile,
        global_batch: 16,
        mini_batch: 8,
        group_size: if loss == "reinforce" { None } else { Some(4) },
        steps,
        eval_every: 2,
        eval_prompts: 8,
        ..TrainConfig::default()
    }
}

fn bits(records: &[MetricsRecord]) -> Vec<Vec<Option<u64>>> {
    records
        .iter()
        .map(|r| {
            [r.train_reward, r.eval_reward, r.loss, r.grad_norm, r.delta_mean_abs, r.delta_max_abs, r.k1_mean, r.k3_mean]
                .iter()
                .map(|v| v.map(f64::to_bits))
                .chain([Some(r.step), Some(u64::from(r.diverged))])
                .collect()
        })
        .collect()
}

fn determinism(opts: &SelftestOptions) -> Result<String, String> {
    let mut profile = ExecutionProfile::variant();
    profile.fault = opts.fault;
    let mut config = tiny_run("tis-srs-k3-corr-ratio", ExecutionProfile::exact(), 3);
    config.rollout_profile = profile;
    let run = |threads: usize| -> Result<Vec<Vec<Option<u64>>>, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        pool.install(|| run_experiment(&config, &mut ())).map(|r| bits(&r.records)).map_err(|e| e.to_string())
    };
    let a = run(1)?;
    if run(1)? != a {
        return Err("repeated runs differ".into());
    }
    if run(4)? != a {
        return Err("1-thread and 4-thread runs differ".into());
    }
    Ok(format!("{} records identical across repeats and thread counts", a.len()))
}

// Loss of `trajs` with current log-probabilities evaluated at `params`.
fn loss_at(params: &PolicyParams, trajs: &[Trajectory], cfg: &LossConfig) -> Result<f64, String> {
    let mut t = trajs.to_vec();
    for tr in &mut t {
        let lp = sequence_logprobs(params, &tr.prompt, &tr.response(), &ExecutionProfile::exact()).map_err(|e| e.to_string())?;
        for (r, l) in tr.tokens.iter_mut().zip(lp) {
            r.logp_cur = Some(l);
        }
    }
    assemble_loss(&t, cfg).map(|b| b.loss).map_err(|e| e.to_string())
}

fn nudge(params: &PolicyParams, idx: usize, h: f64) -> PolicyParams {
    let mut p = params.clone();
    let mut k = idx;
    for t in p.tensors_mut() {
        if k < t.len() {
            t[k] += h;
            break;
        }
        k -= t.len();
    }
    p
}

fn gradient_check(opts: &SelftestOptions) -> Result<String, String> {
    let cfg = small_policy();
    let spec = TaskSpec { prompt_len: 3, target_len: 3, ..TaskSpec::default() };
    let mut profile = ExecutionProfile::variant();
    profile.fault = opts.fault;
    let mut worst = 0.0f64;
    for (vi, name) in ["reinforce", "grpo_recompute", "grpo_bypass", "tis", "srs", "tis_srs"].iter().enumerate() {
        let loss = LossConfig { tau_seq: f64::INFINITY, clip_eps: 0.5, ..LossConfig::named(name).expect("named") };
        let params = init_params(cfg, 100 + vi as u64).map_err(|e| e.to_string())?;
        let prompts = gen_prompts(&spec, 3, 5, cfg.vocab_size, cfg.context_window).map_err(|e| e.to_string())?;
        let settings = RolloutSettings { group_size: 2, max_len: 4, temperature: 1.0, seed: 9 };
        let mut batch = generate_batch(&params, &prompts, spec.kind, &profile, settings).map_err(|e| e.to_string())?;
        recompute_old(&params, &mut batch, &ExecutionProfile::exact()).map_err(|e| e.to_string())?;
        let moved = nudge(&params, 3, 0.05);
        refresh_current(&moved, &mut batch, &ExecutionProfile::exact()).map_err(|e| e.to_string())?;
        let mut rng = RngStream::new(vi as u64, &[2]);
        for t in &mut batch.trajectories {
            let a = rng.between(-1.5, 1.5);
            t.tokens.iter_mut().for_each(|r| r.advantage = Some(a));
        }
        let lb = assemble_loss(&batch.trajectories, &loss).map_err(|e| e.to_string())?;
        let responses: Vec<Vec<Token>> = batch.trajectories.iter().map(|t| t.response()).collect();
        let seqs: Vec<ScoredSequence<'_>> = batch
            .trajectories
            .iter()
            .zip(&responses)
            .zip(&lb.token_coeffs)
            .map(|((t, r), c)| ScoredSequence { prompt: &t.prompt, response: r, coeffs: c })
            .collect();
        let (_, grad) = grad_surrogate(&moved, &seqs).map_err(|e| e.to_string())?;
        let g = grad.flat();
        let h = 1e-5;
        for c in 0..16 {
            let idx = rng.below(g.len() as u64) as usize;
            let fd = (loss_at(&nudge(&moved, idx, h), &batch.trajectories, &loss)?
                - loss_at(&nudge(&moved, idx, -h), &batch.trajectories, &loss)?)
                / (2.0 * h);
            let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-3);
            worst = worst.max(err);
            if err > 1e-4 {
                return Err(format!("{name}: coordinate {idx} (probe {c}) analytic {} vs numeric {fd}", g[idx]));
            }
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn ratio_identity(_: &SelftestOptions) -> Result<String, String> {
    let e = |e: crate::rlcore::RlError| e.to_string();
    if k1(1.0).map_err(e)? != 0.0 || k3(1.0).map_err(e)? != 0.0 {
        return Err("estimators are not zero at r = 1".into());
    }
    let mut rng = RngStream::new(3, &[3]);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (cur, old, roll) = (rng.between(-12.0, 0.0), rng.between(-12.0, 0.0), rng.between(-12.0, 0.0));
        let r = ratio_triple(cur, old, roll).map_err(e)?;
        let rel = (r.r_rollout - r.r_train * r.r_corr).abs() / r.r_rollout;
        worst = worst.max(rel);
        if rel > 1e-12 {
            return Err(format!("r_rollout != r_train * r_corr at ({cur}, {old}, {roll}): relative {rel:e}"));
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn zero_mismatch(opts: &SelftestOptions) -> Result<String, String> {
    let mut profile = ExecutionProfile::variant();
    profile.fault = opts.fault;
    let run = |loss: &str| run_experiment(&tiny_run(loss, profile, 4), &mut ()).map_err(|e| e.to_string());
    let pairs = [("tis", "grpo_recompute"), ("tis_srs", "tis"), ("srs-k3-corr-ratio", "grpo_bypass"), ("tis-srs-k1-corr-ratio", "tis")];
    for (corrected, plain) in pairs {
        let (a, b) = (run(corrected)?, run(plain)?);
        for r in &a.records[1..] {
            if r.delta_max_abs != Some(0.0) || r.rejection_rate != Some(0.0) || r.tis_truncation_rate != Some(0.0) {
                return Err(format!("{corrected} step {}: nonzero mismatch or correction activity", r.step));
            }
        }
        if bits(&a.records) != bits(&b.records) || a.params != b.params {
            return Err(format!("{corrected} does not reduce to {plain} bitwise"));
        }
    }
    Ok(format!("{} pairs reduce bitwise", pairs.len()))
}

/// Runs every contract and reports each by name.
pub fn cmd_selftest(opts: &SelftestOptions) -> Vec<ContractResult> {
    type Suite = fn(&SelftestOptions) -> Result<String, String>;
    let suites: [Suite; 5] = [batch_invariance, determinism, gradient_check, ratio_identity, zero_mismatch];
    CONTRACTS
        .iter()
        .zip(suites)
        .map(|(&name, suite)| {
            let start = Instant::now();
            let (passed, detail) = match suite(opts) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            ContractResult { name, passed, detail, millis: start.elapsed().as_millis() }
        })
        .collect()
}
