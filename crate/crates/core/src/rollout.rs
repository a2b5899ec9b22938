//! Trajectory generation on the rollout path and log-probability
//! re-evaluation on the trainer path.

use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detkernels::ExecutionProfile;
use crate::policy::{sample_response, sequence_logprobs, PolicyError, PolicyParams, Token};
use crate::rng::RngStream;
use crate::tasks::{score, Prompt, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("group size must be at least 1")]
    InvalidGroupSize,
    #[error("batch was generated by parameters {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("trajectory {index} token {position}: logp_old_train is missing")]
    MissingOldTrain { index: usize, position: usize },
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: Token,
    /// Log-probability under the rollout path at θ_old.
    pub logp_rollout: f64,
    /// Log-probability under the trainer path at θ_old.
    pub logp_old_train: Option<f64>,
    /// Log-probability under the trainer path at the current θ.
    pub logp_cur: Option<f64>,
    pub advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: u64,
    pub group_index: usize,
    pub prompt: Vec<Token>,
    pub tokens: Vec<TokenRecord>,
    pub reward: f64,
    pub rejected: bool,
}

impl Trajectory {
    pub fn response(&self) -> Vec<Token> {
        self.tokens.iter().map(|t| t.token).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub trajectories: Vec<Trajectory>,
    pub params_old_fingerprint: String,
    pub rollout_profile: ExecutionProfile,
    /// Set once `recompute_old` has run.
    pub train_profile: Option<ExecutionProfile>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.trajectories.iter().map(|t| t.tokens.len()).sum()
    }
}

/// Sampling settings shared by every trajectory of a batch.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// `G` sampled responses per prompt, ordered by `(prompt, group_index)`.
///
/// Each trajectory draws from its own stream keyed by `(seed, prompt_id, g)`,
/// so the batch does not depend on how work is scheduled.
pub fn generate_batch(
    params_old: &PolicyParams,
    prompts: &[Prompt],
    task: TaskKind,
    rollout_profile: &ExecutionProfile,
    settings: RolloutSettings,
) -> Result<TrajectoryBatch, RolloutError> {
    if settings.group_size == 0 {
        return Err(RolloutError::InvalidGroupSize);
    }
    let g_count = settings.group_size;
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|p| (0..g_count).map(move |g| (p, g))).collect();
    let trajectories = jobs
        .par_iter()
        .map(|&(p, g)| {
            let prompt = &prompts[p];
            let mut rng = RngStream::new(settings.seed, &[prompt.id, g as u64]);
            let sample = sample_response(params_old, &prompt.tokens, rollout_profile, &mut rng, settings.max_len, settings.temperature)?;
            let reward = score(task, prompt, &sample.tokens);
            let tokens = sample
                .tokens
                .iter()
                .zip(&sample.logp)
                .map(|(&token, &logp_rollout)| TokenRecord { token, logp_rollout, logp_old_train: None, logp_cur: None, advantage: None })
                .collect();
            Ok(Trajectory { prompt_id: prompt.id, group_index: g, prompt: prompt.tokens.clone(), tokens, reward, rejected: false })
        })
        .collect::<Result<Vec<_>, RolloutError>>()?;
    Ok(TrajectoryBatch {
        trajectories,
        params_old_fingerprint: params_old.fingerprint(),
        rollout_profile: *rollout_profile,
        train_profile: None,
    })
}

fn trainer_logprobs(params: &PolicyParams, trajectories: &[Trajectory], profile: &ExecutionProfile) -> Result<Vec<Vec<f64>>, RolloutError> {
    trajectories.par_iter().map(|t| Ok(sequence_logprobs(params, &t.prompt, &t.response(), profile)?)).collect()
}

/// Fills `logp_old_train` by re-evaluating the sampled tokens on the trainer
/// path. `logp_rollout` is left as recorded.
pub fn recompute_old(params_old: &PolicyParams, batch: &mut TrajectoryBatch, train_profile: &ExecutionProfile) -> Result<(), RolloutError> {
    let actual = params_old.fingerprint();
    if actual != batch.params_old_fingerprint {
        return Err(RolloutError::FingerprintMismatch { expected: batch.params_old_fingerprint.clone(), actual });
    }
    let lps = trainer_logprobs(params_old, &batch.trajectories, train_profile)?;
    for (traj, lp) in batch.trajectories.iter_mut().zip(lps) {
        for (rec, v) in traj.tokens.iter_mut().zip(lp) {
            rec.logp_old_train = Some(v);
        }
    }
    batch.train_profile = Some(*train_profile);
    Ok(())
}

/// Fills `logp_cur` for every trajectory under the current parameters.
pub fn refresh_current(params: &PolicyParams, batch: &mut TrajectoryBatch, train_profile: &ExecutionProfile) -> Result<(), RolloutError> {
    let n = batch.len();
    refresh_range(params, batch, 0..n, train_profile)
}

/// `refresh_current` restricted to one mini-batch.
pub fn refresh_range(
    params: &PolicyParams,
    batch: &mut TrajectoryBatch,
    range: Range<usize>,
    train_profile: &ExecutionProfile,
) -> Result<(), RolloutError> {
    let slice = &mut batch.trajectories[range];
    let lps = trainer_logprobs(params, slice, train_profile)?;
    for (traj, lp) in slice.iter_mut().zip(lps) {
        for (rec, v) in traj.tokens.iter_mut().zip(lp) {
            rec.logp_cur = Some(v);
        }
    }
    Ok(())
}

/// Per-token δ over response tokens, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaStats {
    pub per_token_delta: Vec<f64>,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// `δ_t = logp_old_train − logp_rollout` with batch mean and max of `|δ_t|`.
pub fn delta_stats(batch: &TrajectoryBatch) -> Result<DeltaStats, RolloutError> {
    delta_stats_of(&batch.trajectories)
}

pub fn delta_stats_of(trajectories: &[Trajectory]) -> Result<DeltaStats, RolloutError> {
    let mut per_token_delta = Vec::new();
    for (index, traj) in trajectories.iter().enumerate() {
        for (position, rec) in traj.tokens.iter().enumerate() {
            let old = rec.logp_old_train.ok_or(RolloutError::MissingOldTrain { index, position })?;
            per_token_delta.push(old - rec.logp_rollout);
        }
    }
    let max_abs = per_token_delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mean_abs =
        if per_token_delta.is_empty() { 0.0 } else { per_token_delta.iter().map(|d| d.abs()).sum::<f64>() / per_token_delta.len() as f64 };
    Ok(DeltaStats { per_token_delta, mean_abs, max_abs })
}

/// Header line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub manifest: String,
    pub loss: crate::rlcore::LossConfig,
    pub rollout_profile: ExecutionProfile,
    pub train_profile: ExecutionProfile,
    /// Which tokens enter the δ statistics.
    pub delta_scope: String,
}

/// One trajectory as written to a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: u64,
    pub prompt_id: u64,
    pub g: usize,
    pub tokens: Vec<Token>,
    pub logp_rollout: Vec<f64>,
    pub logp_old_train: Vec<Option<f64>>,
    pub logp_cur: Vec<Option<f64>>,
    pub reward: f64,
    pub advantage: Option<f64>,
    pub rejected: bool,
}

impl TraceRecord {
    pub fn from_trajectory(step: u64, t: &Trajectory) -> Self {
        TraceRecord {
            step,
            prompt_id: t.prompt_id,
            g: t.group_index,
            tokens: t.response(),
            logp_rollout: t.tokens.iter().map(|r| r.logp_rollout).collect(),
            logp_old_train: t.tokens.iter().map(|r| r.logp_old_train).collect(),
            logp_cur: t.tokens.iter().map(|r| r.logp_cur).collect(),
            reward: t.reward,
            advantage: t.tokens.first().and_then(|r| r.advantage),
            rejected: t.rejected,
        }
    }

    /// Rebuilds the trajectory; the prompt tokens are not part of a trace.
    pub fn to_trajectory(&self) -> Trajectory {
        let tokens = (0..self.tokens.len())
            .map(|i| TokenRecord {
                token: self.tokens[i],
                logp_rollout: self.logp_rollout[i],
                logp_old_train: self.logp_old_train[i],
                logp_cur: self.logp_cur[i],
                advantage: self.advantage,
            })
            .collect();
        Trajectory {
            prompt_id: self.prompt_id,
            group_index: self.g,
            prompt: Vec::new(),
            tokens,
            reward: self.reward,
            rejected: self.rejected,
        }
    }

    fn check(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if n == 0 {
            return Err("empty response".into());
        }
        if self.logp_rollout.len() != n || self.logp_old_train.len() != n || self.logp_cur.len() != n {
            return Err("per-token arrays differ in length".into());
        }
        Ok(())
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, meta: &TraceMeta) -> Result<Self, RolloutError> {
        serde_json::to_writer(&mut out, &serde_json::json!({ "meta": meta })).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(TraceWriter { out })
    }

    pub fn write_batch(&mut self, step: u64, trajectories: &[Trajectory]) -> Result<(), RolloutError> {
        for t in trajectories {
            serde_json::to_writer(&mut self.out, &TraceRecord::from_trajectory(step, t)).map_err(std::io::Error::from)?;
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, RolloutError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: TraceMeta,
}

/// Parses a trace: the meta line followed by one record per line.
pub fn read_trace<R: BufRead>(r: R) -> Result<(TraceMeta, Vec<TraceRecord>), RolloutError> {
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| RolloutError::Trace { line: lineno, message };
        if meta.is_none() {
            let m: MetaLine = serde_json::from_str(&line).map_err(|e| err(format!("bad meta line: {e}")))?;
            meta = Some(m.meta);
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.check().map_err(err)?;
        records.push(rec);
    }
    let meta = meta.ok_or(RolloutError::Trace { line: 1, message: "missing meta line".into() })?;
    Ok((meta, records))
}
