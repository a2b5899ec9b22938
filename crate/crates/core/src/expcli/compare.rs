//! `compare`: a matrix of runs and their summary table.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use toml::{Table, Value};

use super::config::{config_from_table, merge, read_table};
use super::run::{execute, RunOutcome};
use super::CliError;
use crate::trainer::{MetricsRecord, TrainConfig};

/// Centered moving-average width for reward curves.
pub const SMOOTH_WINDOW: usize = 25;
/// Trailing training steps averaged into the final reward.
pub const FINAL_WINDOW: usize = 100;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Matrix file: shared `base` keys, a list of named cells whose keys are
/// merged over the base, and the seeds every cell runs with.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    seeds: Vec<u64>,
    /// Cell whose curves the reward gap is measured against. Defaults to
    /// the first cell with exact rollout and train profiles.
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    base: Table,
    #[serde(rename = "cell")]
    cells: Vec<Table>,
}

#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Matrix {
    pub cells: Vec<MatrixCell>,
    pub seeds: Vec<u64>,
    pub reference: String,
}

pub fn load_matrix(path: &Path) -> Result<Matrix, CliError> {
    let table = read_table(path)?;
    let file = MatrixFile::deserialize(Value::Table(table)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if file.seeds.is_empty() || file.cells.is_empty() {
        return Err(CliError::Config("a matrix needs at least one seed and one cell".into()));
    }
    let mut cells = Vec::new();
    for (i, mut t) in file.cells.into_iter().enumerate() {
        let name = match t.remove("name") {
            Some(Value::String(s)) if !s.is_empty() && !s.contains(['/', '\\']) => s,
            _ => return Err(CliError::Config(format!("cell {} needs a plain `name`", i + 1))),
        };
        if cells.iter().any(|c: &MatrixCell| c.name == name) {
            return Err(CliError::Config(format!("duplicate cell name `{name}`")));
        }
        let mut merged = file.base.clone();
        merge(&mut merged, &t);
        let config = config_from_table(merged).map_err(|e| CliError::Config(format!("cell `{name}`: {e}")))?;
        cells.push(MatrixCell { name, config });
    }
    let reference = match file.reference {
        Some(r) if cells.iter().any(|c| c.name == r) => r,
        Some(r) => return Err(CliError::Config(format!("reference `{r}` is not a cell"))),
        None => cells
            .iter()
            .find(|c| c.config.rollout_profile == c.config.train_profile && c.config.rollout_profile.accum.is_exact())
            .map(|c| c.name.clone())
            .ok_or_else(|| CliError::Config("no exact-profile cell to use as the reference".into()))?,
    };
    let mut seeds = file.seeds;
    seeds.dedup();
    Ok(Matrix { cells, seeds, reference })
}

/// Per-step train rewards, in step order.
pub fn train_curve(records: &[MetricsRecord]) -> Vec<f64> {
    records.iter().filter_map(|r| r.train_reward).collect()
}

/// Centered moving average; the window shrinks at the ends.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..curve.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(curve.len());
            curve[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Mean absolute difference of the smoothed curves over their common
/// prefix.
pub fn reward_gap(curve: &[f64], reference: &[f64]) -> f64 {
    let (a, b) = (smooth(curve, SMOOTH_WINDOW), smooth(reference, SMOOTH_WINDOW));
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::NAN;
    }
    a[..n].iter().zip(&b[..n]).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64
}

/// Mean train reward over the last `FINAL_WINDOW` steps.
pub fn final_reward(curve: &[f64]) -> Option<f64> {
    if curve.is_empty() {
        return None;
    }
    let tail = &curve[curve.len().saturating_sub(FINAL_WINDOW)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// First step at which the run diverged, or at which its smoothed train
/// reward fell below half of an earlier peak of at least 0.5.
pub fn steps_to_collapse(records: &[MetricsRecord]) -> Option<u64> {
    if let Some(r) = records.iter().find(|r| r.diverged) {
        return Some(r.step);
    }
    let steps: Vec<u64> = records.iter().filter(|r| r.train_reward.is_some()).map(|r| r.step).collect();
    let s = smooth(&train_curve(records), SMOOTH_WINDOW);
    let mut peak = f64::NEG_INFINITY;
    for (v, step) in s.iter().zip(steps) {
        peak = peak.max(*v);
        if peak >= 0.5 && *v < 0.5 * peak {
            return Some(step);
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub cell: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: String,
    pub steps: u64,
    pub diverged: bool,
    pub final_train_reward: Option<f64>,
    pub best_train_reward: Option<f64>,
    pub final_eval_reward: Option<f64>,
    pub best_eval_reward: Option<f64>,
    pub steps_to_collapse: Option<u64>,
    pub reward_gap: Option<f64>,
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "cell",
    "seed",
    "config_hash",
    "status",
    "steps",
    "diverged",
    "final_train_reward",
    "best_train_reward",
    "final_eval_reward",
    "best_eval_reward",
    "steps_to_collapse",
    "reward_gap",
];

fn summarize(cell: &str, seed: u64, outcome: &Result<RunOutcome, CliError>, reference: Option<&[f64]>) -> SummaryRow {
    let mut row = SummaryRow {
        cell: cell.to_string(),
        seed,
        config_hash: String::new(),
        status: String::new(),
        steps: 0,
        diverged: false,
        final_train_reward: None,
        best_train_reward: None,
        final_eval_reward: None,
        best_eval_reward: None,
        steps_to_collapse: None,
        reward_gap: None,
    };
    match outcome {
        Err(e) => row.status = format!("error: {e}"),
        Ok(o) => {
            let curve = train_curve(&o.records);
            let evals: Vec<f64> = o.records.iter().filter_map(|r| r.eval_reward).collect();
            row.config_hash = o.manifest.config_hash.clone();
            row.status = "ok".into();
            row.steps = o.manifest.steps_completed;
            row.diverged = o.manifest.diverged;
            row.final_train_reward = final_reward(&curve);
            row.best_train_reward = smooth(&curve, SMOOTH_WINDOW).into_iter().reduce(f64::max);
            row.final_eval_reward = evals.last().copied();
            row.best_eval_reward = evals.iter().copied().reduce(f64::max);
            row.steps_to_collapse = steps_to_collapse(&o.records);
            row.reward_gap = reference.map(|r| reward_gap(&curve, r));
        }
    }
    row
}

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.cell.clone(),
            r.seed.to_string(),
            r.config_hash.clone(),
            r.status.clone(),
            r.steps.to_string(),
            u8::from(r.diverged).to_string(),
            f(r.final_train_reward),
            f(r.best_train_reward),
            f(r.final_eval_reward),
            f(r.best_eval_reward),
            r.steps_to_collapse.map(|s| s.to_string()).unwrap_or_default(),
            f(r.reward_gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cell_dir(out: &Path, cell: &str, seed: u64) -> PathBuf {
    out.join(cell).join(format!("seed-{seed}"))
}

/// Runs every (cell, seed) pair, each into its own directory, and writes
/// `summary.csv` in cell-then-seed order.
pub fn run_matrix(matrix: &Matrix, out: &Path, trace: bool) -> Result<Vec<SummaryRow>, CliError> {
    let jobs: Vec<(usize, u64)> = (0..matrix.cells.len()).flat_map(|c| matrix.seeds.iter().map(move |&s| (c, s))).collect();
    let outcomes: Vec<Result<RunOutcome, CliError>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = &matrix.cells[c];
            let config = TrainConfig { seed, ..cell.config.clone() };
            execute(&config, &cell_dir(out, &cell.name, seed), trace)
        })
        .collect();
    let ref_idx = matrix.cells.iter().position(|c| c.name == matrix.reference).expect("validated");
    let rows = jobs
        .iter()
        .zip(&outcomes)
        .map(|(&(c, seed), o)| {
            let reference =
                jobs.iter().position(|&j| j == (ref_idx, seed)).and_then(|k| outcomes[k].as_ref().ok()).map(|r| train_curve(&r.records));
            summarize(&matrix.cells[c].name, seed, o, reference.as_deref())
        })
        .collect::<Vec<_>>();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(SUMMARY_FILE);
    let f = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_summary(&rows, std::io::BufWriter::new(f))?;
    Ok(rows)
}

pub fn cmd_compare(matrix_path: &Path, out: &Path, trace: bool) -> Result<Vec<SummaryRow>, CliError> {
    let matrix = load_matrix(matrix_path)?;
    run_matrix(&matrix, out, trace)
}
