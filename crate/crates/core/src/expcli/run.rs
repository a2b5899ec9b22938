//! `run`: one experiment and its output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{config_hash, load_config, resolved_toml};
use super::metrics::{header_line, MetricsWriter};
use super::{CliError, EXIT_DIVERGED, EXIT_OK};
use crate::detkernels::ExecutionProfile;
use crate::policy::write_checkpoint;
use crate::rlcore::ContributionHistogram;
use crate::rollout::{TraceMeta, TraceWriter, TrajectoryBatch};
use crate::trainer::{run_experiment, MetricsRecord, RunObserver, TrainConfig};

pub const ARTIFACT_VERSION: &str = concat!("timlab ", env!("CARGO_PKG_VERSION"));

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub rollout_profile: ExecutionProfile,
    pub train_profile: ExecutionProfile,
    pub seed: u64,
    /// Output role to file name, relative to the manifest.
    pub files: BTreeMap<String, String>,
    pub steps_completed: u64,
    pub diverged: bool,
    pub checkpoint_fingerprint: String,
    /// C(r) counts over the whole run.
    pub contribution_histogram: ContributionHistogram,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub trace: bool,
}

/// What a finished run left on disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.manifest.diverged {
            EXIT_DIVERGED
        } else {
            EXIT_OK
        }
    }
}

struct FileObserver {
    metrics: MetricsWriter<BufWriter<File>>,
    trace: Option<TraceWriter<BufWriter<File>>>,
    error: Option<CliError>,
}

impl FileObserver {
    fn keep(&mut self, r: Result<(), CliError>) {
        if let (Err(e), None) = (r, &self.error) {
            self.error = Some(e);
        }
    }
}

impl RunObserver for FileObserver {
    fn on_record(&mut self, record: &MetricsRecord) {
        let r = self.metrics.write(record);
        self.keep(r);
    }

    fn wants_batches(&self) -> bool {
        self.trace.is_some()
    }

    fn on_batch(&mut self, step: u64, batch: &TrajectoryBatch) {
        if let Some(t) = self.trace.as_mut() {
            let r = t.write_batch(step, &batch.trajectories).map_err(CliError::from);
            self.keep(r);
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Runs `config` and writes its outputs into `out`, which is created if
/// needed.
pub fn execute(config: &TrainConfig, out: &Path, trace: bool) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let hash = config_hash(config);

    let mut files = BTreeMap::new();
    files.insert("config".to_string(), CONFIG_FILE.to_string());
    files.insert("metrics".to_string(), METRICS_FILE.to_string());
    files.insert("checkpoint".to_string(), CHECKPOINT_FILE.to_string());

    let mut cfg_out = create(&out.join(CONFIG_FILE))?;
    write!(cfg_out, "# manifest = \"{hash}\"\n{}", resolved_toml(config))?;
    cfg_out.flush()?;

    let metrics = MetricsWriter::new(create(&out.join(METRICS_FILE))?, &header_line(&hash, config))?;
    let trace = if trace {
        files.insert("trace".to_string(), TRACE_FILE.to_string());
        let meta = TraceMeta {
            manifest: hash.clone(),
            loss: config.loss,
            rollout_profile: config.rollout_profile,
            train_profile: config.train_profile,
            delta_scope: "response_tokens".to_string(),
        };
        Some(TraceWriter::new(create(&out.join(TRACE_FILE))?, &meta)?)
    } else {
        None
    };
    let mut obs = FileObserver { metrics, trace, error: None };
    let result = run_experiment(config, &mut obs).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(e) = obs.error.take() {
        return Err(e);
    }
    obs.metrics.finish()?.flush()?;
    if let Some(t) = obs.trace.take() {
        t.finish()?.flush()?;
    }

    let mut ck = create(&out.join(CHECKPOINT_FILE))?;
    write_checkpoint(&result.params, &mut ck).map_err(|e| CliError::Config(e.to_string()))?;
    ck.flush()?;

    let manifest = RunManifest {
        config_hash: hash,
        artifact_version: ARTIFACT_VERSION.to_string(),
        rollout_profile: config.rollout_profile,
        train_profile: config.train_profile,
        seed: config.seed,
        files,
        steps_completed: result.records.last().map_or(0, |r| r.step),
        diverged: result.diverged,
        checkpoint_fingerprint: result.params.fingerprint(),
        contribution_histogram: result.histogram,
    };
    let mut m = create(&out.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(&mut m, &manifest).map_err(std::io::Error::from)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(RunOutcome { manifest, records: result.records })
}

/// Loads the config, applies the overrides and `--seed`, and runs it.
pub fn cmd_run(opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let mut config = load_config(&opts.config, &opts.overrides)?;
    if let Some(s) = opts.seed {
        config.seed = s;
    }
    execute(&config, &opts.out, opts.trace)
}
