//! The optimization loop: snapshot, roll out, re-evaluate, update, log.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detkernels::{ExecutionProfile, KernelError};
use crate::policy::{grad_surrogate, greedy_response, init_params, Gradient, PolicyConfig, PolicyError, PolicyParams, ScoredSequence};
use crate::rlcore::{adv_batch_whiten, adv_grpo, assemble_loss, AdvMode, ContributionHistogram, LossConfig, RlError, Variant};
use crate::rng::derive_seed;
use crate::rollout::{delta_stats, generate_batch, recompute_old, refresh_range, RolloutError, RolloutSettings, TrajectoryBatch};
use crate::tasks::{gen_prompts, score, Prompt, TaskError, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl TrainError {
    /// Numeric blow-ups that mark a run as diverged rather than broken.
    pub fn is_numeric(&self) -> bool {
        fn kernel(e: &KernelError) -> bool {
            matches!(e, KernelError::NonFinite { .. } | KernelError::Overflow { .. })
        }
        match self {
            TrainError::Policy(PolicyError::Kernel(k)) => kernel(k),
            TrainError::Rollout(RolloutError::Policy(PolicyError::Kernel(k))) => kernel(k),
            TrainError::Rl(RlError::InvalidRatio(_) | RlError::InvalidLogprob(_)) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Loss and profiles accept a preset name in place of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub task: TaskSpec,
    #[serde(deserialize_with = "crate::preset::deserialize")]
    pub loss: LossConfig,
    #[serde(deserialize_with = "crate::preset::deserialize")]
    pub rollout_profile: ExecutionProfile,
    #[serde(deserialize_with = "crate::preset::deserialize")]
    pub train_profile: ExecutionProfile,
    pub global_batch: usize,
    pub mini_batch: usize,
    /// Defaults to 1 for REINFORCE and 8 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_prompts: usize,
    pub temperature: f64,
    /// Defaults to the task's answer length plus EOS.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            policy: PolicyConfig::default(),
            task: TaskSpec::default(),
            loss: LossConfig::new(Variant::Reinforce),
            rollout_profile: ExecutionProfile::exact(),
            train_profile: ExecutionProfile::exact(),
            global_batch: 64,
            mini_batch: 16,
            group_size: None,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            steps: 100,
            seed: 0,
            eval_every: 50,
            eval_prompts: 64,
            temperature: 1.0,
            max_len: None,
        }
    }
}

impl TrainConfig {
    /// The same run with every defaulted choice written out.
    pub fn resolved(&self) -> TrainConfig {
        let mut c = self.clone();
        c.group_size = Some(self.group_size());
        c.max_len = Some(self.max_len());
        c.loss.adv_mode = Some(self.loss.adv_mode());
        c
    }

    pub fn group_size(&self) -> usize {
        self.group_size.unwrap_or(if self.loss.variant == Variant::Reinforce { 1 } else { 8 })
    }

    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or_else(|| self.task.max_response_len())
    }

    /// Mini-steps per rollout batch; REINFORCE always takes one.
    pub fn mini_steps(&self) -> usize {
        if self.loss.variant == Variant::Reinforce {
            1
        } else {
            self.global_batch / self.mini_batch
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.policy.validate()?;
        self.task.validate(self.policy.vocab_size, self.policy.context_window)?;
        self.loss.validate()?;
        for (name, p) in [("rollout_profile", &self.rollout_profile), ("train_profile", &self.train_profile)] {
            if let Err(e) = p.validate() {
                return bad(format!("{name}: {e}"));
            }
        }
        let g = self.group_size();
        if self.global_batch == 0 || self.mini_batch == 0 || g == 0 {
            return bad("global_batch, mini_batch and group_size must be positive".into());
        }
        if self.global_batch % self.mini_batch != 0 {
            return bad(format!("mini_batch {} does not divide global_batch {}", self.mini_batch, self.global_batch));
        }
        if self.global_batch % g != 0 {
            return bad(format!("group_size {g} does not divide global_batch {}", self.global_batch));
        }
        match self.loss.adv_mode() {
            AdvMode::GrpoGroup if g < 2 => return bad("group whitening needs group_size >= 2".into()),
            AdvMode::GrpoGroup if self.loss.variant != Variant::Reinforce && self.mini_batch % g != 0 => {
                return bad(format!("group_size {g} does not divide mini_batch {}", self.mini_batch))
            }
            AdvMode::BatchWhiten if self.global_batch < 2 => return bad("batch whitening needs global_batch >= 2".into()),
            _ => {}
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.eval_every == 0 || self.eval_prompts == 0 {
            return bad("eval_every and eval_prompts must be positive".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_len() == 0 {
            return bad("max_len must be at least 1".into());
        }
        Ok(())
    }
}

/// θ_old: a deep copy of the parameters and its content checksum.
pub fn snapshot_old(params: &PolicyParams) -> (PolicyParams, String) {
    let copy = params.clone();
    let fp = copy.fingerprint();
    (copy, fp)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { cfg: AdamConfig, m: Gradient, v: Gradient, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: AdamConfig, params: &PolicyParams) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam { cfg, m: Gradient::zeros_like(params), v: Gradient::zeros_like(params), t: 0 },
        }
    }

    /// Applies one descent step for `grad` with learning rate `lr`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, (_, g)) in params.tensors_mut().into_iter().zip(grad.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam { cfg, m, v, t } => {
                *t += 1;
                let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
                let ms = m.as_params_mut().tensors_mut();
                let vs = v.as_params_mut().tensors_mut();
                for (((p, (_, g)), m), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(ms).zip(vs) {
                    for i in 0..p.len() {
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
        }
    }
}

/// One row of the metrics stream. Training fields are absent on the
/// initial evaluation-only record; `eval_reward` is present on evaluation
/// steps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub train_reward: Option<f64>,
    pub eval_reward: Option<f64>,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub delta_mean_abs: Option<f64>,
    pub delta_max_abs: Option<f64>,
    pub k1_mean: Option<f64>,
    pub k3_mean: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub tis_truncation_rate: Option<f64>,
    pub diverged: bool,
    /// C(r) counts of this step, all mini-steps merged.
    #[serde(skip)]
    pub contribution_histogram: Option<ContributionHistogram>,
}

impl MetricsRecord {
    /// A record with only `step` set.
    pub fn empty(step: u64) -> Self {
        MetricsRecord {
            step,
            train_reward: None,
            eval_reward: None,
            loss: None,
            grad_norm: None,
            delta_mean_abs: None,
            delta_max_abs: None,
            k1_mean: None,
            k3_mean: None,
            clip_fraction: None,
            rejection_rate: None,
            tis_truncation_rate: None,
            diverged: false,
            contribution_histogram: None,
        }
    }

    fn is_finite(&self) -> bool {
        [self.train_reward, self.loss, self.grad_norm, self.delta_mean_abs, self.delta_max_abs, self.k1_mean, self.k3_mean]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Live training state. `step` counts completed updates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub optimizer: Optimizer,
    pub step: u64,
    pub diverged: bool,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = init_params(config.policy, derive_seed(config.seed, "init", 0))?;
        let optimizer = Optimizer::new(config.optimizer, config.adam, &params);
        Ok(TrainState { params, optimizer, step: 0, diverged: false })
    }
}

/// Receives every record and, when requested, every finished batch.
pub trait RunObserver {
    fn on_record(&mut self, _record: &MetricsRecord) {}
    fn wants_batches(&self) -> bool {
        false
    }
    fn on_batch(&mut self, _step: u64, _batch: &TrajectoryBatch) {}
}

impl RunObserver for () {}

fn train_prompts(config: &TrainConfig, step: u64) -> Result<Vec<Prompt>, TrainError> {
    let n = config.global_batch / config.group_size();
    Ok(gen_prompts(
        &config.task,
        n,
        derive_seed(config.seed, "train-prompts", step),
        config.policy.vocab_size,
        config.policy.context_window,
    )?)
}

/// The held-out evaluation prompts of a run.
pub fn eval_prompts(config: &TrainConfig) -> Result<Vec<Prompt>, TrainError> {
    Ok(gen_prompts(
        &config.task,
        config.eval_prompts,
        derive_seed(config.seed, "eval-prompts", 0),
        config.policy.vocab_size,
        config.policy.context_window,
    )?)
}

/// Mean greedy-decoding reward under the rollout profile.
pub fn evaluate(params: &PolicyParams, prompts: &[Prompt], config: &TrainConfig) -> Result<f64, TrainError> {
    let scores = prompts
        .par_iter()
        .map(|p| {
            let resp = greedy_response(params, &p.tokens, &config.rollout_profile, config.max_len())?;
            Ok(score(config.task.kind, p, &resp))
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn set_advantages(batch: &mut TrajectoryBatch, config: &TrainConfig) -> Result<(), TrainError> {
    let rewards: Vec<f64> = batch.trajectories.iter().map(|t| t.reward).collect();
    let adv = match config.loss.adv_mode() {
        AdvMode::BatchWhiten => adv_batch_whiten(&rewards)?,
        AdvMode::GrpoGroup => adv_grpo(&rewards, config.group_size())?,
    };
    for (t, a) in batch.trajectories.iter_mut().zip(adv) {
        t.tokens.iter_mut().for_each(|r| r.advantage = Some(a));
    }
    Ok(())
}

struct StepTotals {
    loss: f64,
    grad_norm: f64,
    tokens: usize,
    accepted_tokens: usize,
    clipped: usize,
    truncated: usize,
    rejected: usize,
    k1: f64,
    k3: f64,
    hist: ContributionHistogram,
}

/// One rollout batch and its mini-steps. On a numeric failure the state is
/// flagged as diverged and the returned record carries the flag together
/// with whatever was measured before the failure.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, observer: &mut dyn RunObserver) -> Result<MetricsRecord, TrainError> {
    let step = state.step + 1;
    let mut record = MetricsRecord::empty(step);
    match run_step(state, config, &mut record, observer) {
        Ok(()) => {}
        Err(e) if e.is_numeric() => record.diverged = true,
        Err(e) => return Err(e),
    }
    if !record.is_finite() || !state.params.is_finite() {
        record.diverged = true;
    }
    state.step = step;
    state.diverged |= record.diverged;
    Ok(record)
}

fn run_step(
    state: &mut TrainState,
    config: &TrainConfig,
    record: &mut MetricsRecord,
    observer: &mut dyn RunObserver,
) -> Result<(), TrainError> {
    let step = record.step;
    let prompts = train_prompts(config, step)?;
    let (old, _) = snapshot_old(&state.params);
    let settings = RolloutSettings {
        group_size: config.group_size(),
        max_len: config.max_len(),
        temperature: config.temperature,
        seed: derive_seed(config.seed, "rollout", step),
    };
    let mut batch = generate_batch(&old, &prompts, config.task.kind, &config.rollout_profile, settings)?;
    record.train_reward = Some(batch.trajectories.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64);

    // always run: bypass variants use it for logging only
    recompute_old(&old, &mut batch, &config.train_profile)?;
    let d = delta_stats(&batch)?;
    record.delta_mean_abs = Some(d.mean_abs);
    record.delta_max_abs = Some(d.max_abs);
    set_advantages(&mut batch, config)?;

    let n_mini = config.mini_steps();
    let size = batch.len() / n_mini;
    let mut tot = StepTotals {
        loss: 0.0,
        grad_norm: 0.0,
        tokens: 0,
        accepted_tokens: 0,
        clipped: 0,
        truncated: 0,
        rejected: 0,
        k1: 0.0,
        k3: 0.0,
        hist: ContributionHistogram::default(),
    };
    for i in 0..n_mini {
        let range = i * size..(i + 1) * size;
        refresh_range(&state.params, &mut batch, range.clone(), &config.train_profile)?;
        let slice = &mut batch.trajectories[range];
        let lb = assemble_loss(slice, &config.loss)?;
        for (t, &r) in slice.iter_mut().zip(&lb.rejected) {
            t.rejected = r;
        }
        let responses: Vec<Vec<_>> = slice.iter().map(|t| t.response()).collect();
        let seqs: Vec<ScoredSequence<'_>> = slice
            .iter()
            .zip(&responses)
            .zip(&lb.token_coeffs)
            .map(|((t, resp), c)| ScoredSequence { prompt: &t.prompt, response: resp, coeffs: c })
            .collect();
        let (_, grad) = grad_surrogate(&state.params, &seqs)?;
        let norm = grad.l2_norm();

        tot.loss += lb.loss;
        tot.grad_norm = tot.grad_norm.max(norm);
        tot.tokens += lb.num_tokens;
        tot.accepted_tokens += lb.num_accepted_tokens;
        tot.clipped += lb.num_clipped;
        tot.truncated += lb.num_truncated;
        tot.rejected += lb.rejected.iter().filter(|r| **r).count();
        tot.k1 += lb.k1_sum;
        tot.k3 += lb.k3_sum;
        tot.hist.merge(&lb.contribution_histogram);
        record.loss = Some(tot.loss / (i + 1) as f64);
        record.grad_norm = Some(tot.grad_norm);

        if !lb.loss.is_finite() || !norm.is_finite() {
            record.diverged = true;
            break;
        }
        state.optimizer.step(&mut state.params, &grad, config.lr);
        if !state.params.is_finite() {
            record.diverged = true;
            break;
        }
    }
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    record.k1_mean = Some(if tot.tokens == 0 { 0.0 } else { tot.k1 / tot.tokens as f64 });
    record.k3_mean = Some(if tot.tokens == 0 { 0.0 } else { tot.k3 / tot.tokens as f64 });
    record.clip_fraction = Some(frac(tot.clipped, tot.accepted_tokens));
    record.rejection_rate = Some(frac(tot.rejected, batch.len()));
    record.tis_truncation_rate = Some(frac(tot.truncated, tot.tokens));
    record.contribution_histogram = Some(tot.hist);
    if observer.wants_batches() {
        observer.on_batch(step, &batch);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub params: PolicyParams,
    pub diverged: bool,
    pub histogram: ContributionHistogram,
}

/// `steps` training steps with greedy evaluation at step 0 and every
/// `eval_every` steps. A diverged step ends the run.
pub fn run_experiment(config: &TrainConfig, observer: &mut dyn RunObserver) -> Result<RunResult, TrainError> {
    let mut state = TrainState::new(config)?;
    let eval_set = eval_prompts(config)?;
    let mut records = Vec::with_capacity(config.steps as usize + 1);
    let mut histogram = ContributionHistogram::default();

    let mut first = MetricsRecord::empty(0);
    first.eval_reward = Some(evaluate(&state.params, &eval_set, config)?);
    observer.on_record(&first);
    records.push(first);

    while state.step < config.steps && !state.diverged {
        let mut rec = train_step(&mut state, config, observer)?;
        if let Some(h) = &rec.contribution_histogram {
            histogram.merge(h);
        }
        if !rec.diverged && rec.step % config.eval_every == 0 {
            match evaluate(&state.params, &eval_set, config) {
                Ok(r) => rec.eval_reward = Some(r),
                Err(e) if e.is_numeric() => rec.diverged = true,
                Err(e) => return Err(e),
            }
            state.diverged |= rec.diverged;
        }
        observer.on_record(&rec);
        records.push(rec);
    }
    Ok(RunResult { records, params: state.params, diverged: state.diverged, histogram })
}
