//! `analyze`: offline mismatch diagnostics from a trace file.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Serialize, Serializer};

use super::CliError;
use crate::rlcore::{centered_contribution, k1, k3, seq_score, ContributionHistogram, Estimator, LossConfig, SeqAgg};
use crate::rollout::{read_trace, TraceMeta, TraceRecord};

pub const TAU_TOK_SWEEP: [f64; 8] = [1.05, 1.1, 1.25, 1.5, 2.0, 4.0, 8.0, f64::INFINITY];
pub const TAU_SEQ_SWEEP: [f64; 9] = [1e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, f64::INFINITY];

// JSON has no infinity; infinite thresholds are written as "inf".
fn threshold<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub trajectories: usize,
    pub tokens: usize,
    pub delta_mean_abs: f64,
    pub delta_max_abs: f64,
    pub k1_mean: f64,
    pub k3_mean: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TisPoint {
    #[serde(serialize_with = "threshold")]
    pub tau_tok: f64,
    pub truncation_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SrsPoint {
    #[serde(serialize_with = "threshold")]
    pub tau_seq: f64,
    pub estimator: Estimator,
    pub seq_agg: SeqAgg,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub manifest: String,
    pub loss: LossConfig,
    pub delta_scope: String,
    pub trajectories: usize,
    pub tokens: usize,
    pub delta_mean_abs: f64,
    pub delta_max_abs: f64,
    /// Mean signed δ.
    pub delta_mean: f64,
    /// Estimators on the variant's PPO ratio over all logged tokens.
    pub k1_mean: f64,
    pub k3_mean: f64,
    /// Estimators on the correction ratio.
    pub k1_corr_mean: f64,
    pub k3_corr_mean: f64,
    pub contribution_histogram: ContributionHistogram,
    pub histogram_edges: Vec<f64>,
    pub steps: Vec<StepReport>,
    pub tis_sweep: Vec<TisPoint>,
    pub srs_sweep: Vec<SrsPoint>,
}

struct Tok {
    delta: f64,
    ratio: f64,
    adv: f64,
}

fn tokens_of(meta: &TraceMeta, idx: usize, rec: &TraceRecord) -> Result<Vec<Tok>, CliError> {
    let denom_train = meta.loss.variant.uses_train_denominator();
    let missing = |what: &str, t: usize| CliError::Config(format!("trace record {}: token {t} has no {what}", idx + 1));
    (0..rec.tokens.len())
        .map(|t| {
            let roll = rec.logp_rollout[t];
            let old = rec.logp_old_train[t].ok_or_else(|| missing("logp_old_train", t))?;
            let cur = rec.logp_cur[t].ok_or_else(|| missing("logp_cur", t))?;
            let denom = if denom_train { old } else { roll };
            Ok(Tok { delta: old - roll, ratio: (cur - denom).exp(), adv: rec.advantage.unwrap_or(0.0) })
        })
        .collect()
}

pub fn analyze<R: BufRead>(r: R) -> Result<AnalysisReport, CliError> {
    let (meta, records) = read_trace(r)?;
    let rl = |e: crate::rlcore::RlError| CliError::Config(e.to_string());

    let mut hist = ContributionHistogram::default();
    let mut by_step: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut all = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let toks = tokens_of(&meta, i, rec)?;
        for t in &toks {
            hist.add(centered_contribution(t.ratio, t.adv), t.adv);
        }
        by_step.entry(rec.step).or_default().push(i);
        all.push(toks);
    }

    let (mut n, mut sum_abs, mut sum_signed, mut max_abs) = (0usize, 0.0, 0.0, 0.0f64);
    let (mut k1s, mut k3s, mut k1c, mut k3c) = (0.0, 0.0, 0.0, 0.0);
    let mut steps = Vec::with_capacity(by_step.len());
    for (&step, idxs) in &by_step {
        let (mut sn, mut s_abs, mut s_max, mut s_k1, mut s_k3) = (0usize, 0.0, 0.0f64, 0.0, 0.0);
        for &i in idxs {
            for t in &all[i] {
                let rc = t.delta.exp();
                sn += 1;
                s_abs += t.delta.abs();
                s_max = s_max.max(t.delta.abs());
                s_k1 += k1(t.ratio).map_err(rl)?;
                s_k3 += k3(t.ratio).map_err(rl)?;
                sum_signed += t.delta;
                k1c += k1(rc).map_err(rl)?;
                k3c += k3(rc).map_err(rl)?;
            }
        }
        let rejected = idxs.iter().filter(|&&i| records[i].rejected).count();
        let mean = |s: f64| if sn == 0 { 0.0 } else { s / sn as f64 };
        steps.push(StepReport {
            step,
            trajectories: idxs.len(),
            tokens: sn,
            delta_mean_abs: mean(s_abs),
            delta_max_abs: s_max,
            k1_mean: mean(s_k1),
            k3_mean: mean(s_k3),
            rejection_rate: rejected as f64 / idxs.len() as f64,
        });
        n += sn;
        sum_abs += s_abs;
        max_abs = max_abs.max(s_max);
        k1s += s_k1;
        k3s += s_k3;
    }
    let mean = |s: f64| if n == 0 { 0.0 } else { s / n as f64 };

    let tis_sweep = TAU_TOK_SWEEP
        .iter()
        .map(|&tau| {
            let over = all.iter().flatten().filter(|t| t.delta.exp() > tau).count();
            TisPoint { tau_tok: tau, truncation_rate: mean(over as f64) }
        })
        .collect();

    let agg = meta.loss.seq_agg;
    let mut srs_sweep = Vec::new();
    for est in [Estimator::K1, Estimator::K3] {
        let scores: Vec<f64> = all
            .iter()
            .map(|toks| {
                let q: Vec<f64> = toks.iter().map(|t| t.delta.exp()).collect();
                seq_score(&q, est, agg)
            })
            .collect::<Result<_, _>>()
            .map_err(rl)?;
        for &tau in &TAU_SEQ_SWEEP {
            let rej = scores.iter().filter(|s| !(**s <= tau)).count();
            let rate = if scores.is_empty() { 0.0 } else { rej as f64 / scores.len() as f64 };
            srs_sweep.push(SrsPoint { tau_seq: tau, estimator: est, seq_agg: agg, rejection_rate: rate });
        }
    }

    Ok(AnalysisReport {
        manifest: meta.manifest,
        loss: meta.loss,
        delta_scope: meta.delta_scope,
        trajectories: records.len(),
        tokens: n,
        delta_mean_abs: mean(sum_abs),
        delta_max_abs: max_abs,
        delta_mean: mean(sum_signed),
        k1_mean: mean(k1s),
        k3_mean: mean(k3s),
        k1_corr_mean: mean(k1c),
        k3_corr_mean: mean(k3c),
        contribution_histogram: hist,
        histogram_edges: ContributionHistogram::edges(),
        steps,
        tis_sweep,
        srs_sweep,
    })
}

/// Analyzes `trace` and writes the report as JSON to `out`.
pub fn cmd_analyze(trace: &Path, out: &Path) -> Result<AnalysisReport, CliError> {
    let f = std::fs::File::open(trace).map_err(|e| CliError::io(trace, e))?;
    let report = analyze(std::io::BufReader::new(f))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
    text.push('\n');
    std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    Ok(report)
}
