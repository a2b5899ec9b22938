//! The metrics CSV: one comment line naming the run, then one row per record.

use std::io::{BufRead, Write};

use super::CliError;
use crate::trainer::{MetricsRecord, OptimizerKind, TrainConfig};

pub const COLUMNS: [&str; 13] = [
    "step",
    "train_reward",
    "eval_reward",
    "loss",
    "grad_norm",
    "delta_mean_abs",
    "delta_max_abs",
    "k1_mean",
    "k3_mean",
    "clip_fraction",
    "rejection_rate",
    "tis_truncation_rate",
    "diverged",
];

/// `# manifest=<hash> optimizer=<...> lr=<...>`
pub fn header_line(hash: &str, config: &TrainConfig) -> String {
    let opt = match config.optimizer {
        OptimizerKind::Sgd => "sgd".to_string(),
        OptimizerKind::Adam => {
            let a = config.adam;
            format!("adam(beta1={},beta2={},eps={})", a.beta1, a.beta2, a.eps)
        }
    };
    format!("# manifest={hash} optimizer={opt} lr={}", config.lr)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn row(r: &MetricsRecord) -> [String; 13] {
    [
        r.step.to_string(),
        cell(r.train_reward),
        cell(r.eval_reward),
        cell(r.loss),
        cell(r.grad_norm),
        cell(r.delta_mean_abs),
        cell(r.delta_max_abs),
        cell(r.k1_mean),
        cell(r.k3_mean),
        cell(r.clip_fraction),
        cell(r.rejection_rate),
        cell(r.tis_truncation_rate),
        u8::from(r.diverged).to_string(),
    ]
}

/// Streams records as they arrive.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, header: &str) -> Result<Self, CliError> {
        writeln!(out, "{header}")?;
        let mut inner = csv::WriterBuilder::new().from_writer(out);
        inner.write_record(COLUMNS)?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), CliError> {
        self.inner.write_record(row(record))?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(self) -> Result<W, CliError> {
        self.inner.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

/// Reads a metrics file back; returns the comment header and the records
/// (without histograms).
pub fn read_metrics<R: BufRead>(mut r: R) -> Result<(String, Vec<MetricsRecord>), CliError> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end().to_string();
    if !header.starts_with("# manifest=") {
        return Err(CliError::Config("metrics file lacks its manifest line".into()));
    }
    let mut rd = csv::ReaderBuilder::new().from_reader(r);
    let cols: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if cols != COLUMNS {
        return Err(CliError::Config(format!("unexpected metrics columns {cols:?}")));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 3;
        let bad = |c: &str| CliError::Config(format!("metrics line {line}: bad `{c}` value"));
        let opt = |j: usize| -> Result<Option<f64>, CliError> {
            let s = &rec[j];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(COLUMNS[j]))
            }
        };
        out.push(MetricsRecord {
            step: rec[0].parse().map_err(|_| bad("step"))?,
            train_reward: opt(1)?,
            eval_reward: opt(2)?,
            loss: opt(3)?,
            grad_norm: opt(4)?,
            delta_mean_abs: opt(5)?,
            delta_max_abs: opt(6)?,
            k1_mean: opt(7)?,
            k3_mean: opt(8)?,
            clip_fraction: opt(9)?,
            rejection_rate: opt(10)?,
            tis_truncation_rate: opt(11)?,
            diverged: match &rec[12] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("diverged")),
            },
            contribution_histogram: None,
        });
    }
    Ok((header, out))
}
