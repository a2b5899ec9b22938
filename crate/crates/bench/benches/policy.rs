use criterion::{black_box, criterion_group, criterion_main, Criterion};
use timlab::detkernels::ExecutionProfile;
use timlab::policy::{forward_batch, init_params, PolicyConfig, Token};
use timlab::rlcore::{assemble_loss, LossConfig};
use timlab::rollout::{generate_batch, recompute_old, refresh_current, RolloutSettings};
use timlab::tasks::{gen_prompts, TaskSpec};

fn bench_forward(c: &mut Criterion) {
    let cfg = PolicyConfig::default();
    let params = init_params(cfg, 0).unwrap();
    let contexts: Vec<Vec<Token>> =
        (0..64).map(|i| (0..cfg.context_window).map(|j| ((i * 7 + j * 3) % cfg.vocab_size) as Token).collect()).collect();
    let mut g = c.benchmark_group("forward_batch/64");
    for (name, profile) in [("exact", ExecutionProfile::exact()), ("variant", ExecutionProfile::variant())] {
        g.bench_function(name, |b| b.iter(|| forward_batch(&params, black_box(&contexts), &profile).unwrap()));
    }
    g.finish();
}

fn bench_rollout_and_loss(c: &mut Criterion) {
    let cfg = PolicyConfig::default();
    let spec = TaskSpec::default();
    let params = init_params(cfg, 0).unwrap();
    let moved = init_params(cfg, 1).unwrap();
    let prompts = gen_prompts(&spec, 8, 0, cfg.vocab_size, cfg.context_window).unwrap();
    let settings = RolloutSettings { group_size: 8, max_len: spec.target_len + 1, temperature: 1.0, seed: 0 };
    let variant = ExecutionProfile::variant();
    c.bench_function("generate_batch/8x8", |b| {
        b.iter(|| generate_batch(&params, black_box(&prompts), spec.kind, &variant, settings).unwrap())
    });

    let mut batch = generate_batch(&params, &prompts, spec.kind, &variant, settings).unwrap();
    recompute_old(&params, &mut batch, &ExecutionProfile::exact()).unwrap();
    refresh_current(&moved, &mut batch, &ExecutionProfile::exact()).unwrap();
    for (i, t) in batch.trajectories.iter_mut().enumerate() {
        let a = (i % 8) as f64 / 4.0 - 1.0;
        t.tokens.iter_mut().for_each(|r| r.advantage = Some(a));
    }
    let mut g = c.benchmark_group("assemble_loss");
    for name in ["grpo_recompute", "tis-srs-k3-corr-ratio", "srs-k3-ppo-ratio"] {
        let loss = LossConfig::named(name).unwrap();
        g.bench_function(name, |b| b.iter(|| assemble_loss(black_box(&batch.trajectories), &loss).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_forward, bench_rollout_and_loss);
criterion_main!(benches);
