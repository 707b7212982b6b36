//! Output directory bookkeeping and the experiment report.
//!
//! Every run directory holds exactly `config.toml`, `logs/`, `artifacts/`
//! and `report.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stok::model::MetricRecord;
use stok::nn::write_atomic;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_LOG: &str = "metrics.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    /// SHA-256 of the resolved `config.toml`.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub wall_time_s: f64,
    pub metrics: Vec<MetricRecord>,
    pub storage: Vec<serde_json::Value>,
    pub details: serde_json::Map<String, serde_json::Value>,
}

/// Fixed-width text table of metric rows.
pub fn metrics_table(rows: &[MetricRecord]) -> String {
    let mut s = format!("{:>5}  {:<6}  {:<32}  {}\n", "epoch", "split", "metric", "value");
    for r in rows {
        s.push_str(&format!("{:>5}  {:<6}  {:<32}  {}\n", r.epoch, r.split, r.metric, r.value));
    }
    s
}

/// Parses `epoch,split,metric,value` lines.
pub fn parse_metrics(text: &str) -> CliResult<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || CliError::Data(format!("malformed metrics line `{l}`"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(MetricRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Rebuilds the metrics table of a finished run from its log alone.
pub fn table_from_logs(run_dir: &Path) -> CliResult<String> {
    let p = run_dir.join("logs").join(METRICS_LOG);
    let text = fs::read_to_string(&p).map_err(|_| CliError::Missing(format!("metrics log `{}`", p.display())))?;
    Ok(metrics_table(&parse_metrics(&text)?))
}

pub struct Run {
    command: String,
    pub out: PathBuf,
    config_hash: String,
    seed: u64,
    start: Instant,
    metrics: Vec<MetricRecord>,
    storage: Vec<serde_json::Value>,
    details: serde_json::Map<String, serde_json::Value>,
    notes: Vec<String>,
}

impl Run {
    pub fn begin(command: &str, cfg: &RunConfig) -> CliResult<Self> {
        let out = cfg.out_dir.clone();
        fs::create_dir_all(out.join("logs"))?;
        fs::create_dir_all(out.join("artifacts"))?;
        let text = cfg.to_toml();
        write_atomic(&out.join(CONFIG_FILE), text.as_bytes())?;
        Ok(Self {
            command: command.to_string(),
            out,
            config_hash: hex::encode(Sha256::digest(text.as_bytes())),
            seed: cfg.seed,
            start: Instant::now(),
            metrics: Vec::new(),
            storage: Vec::new(),
            details: serde_json::Map::new(),
            notes: Vec::new(),
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join("artifacts").join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.out.join("logs").join(name)
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("[{}] {msg}", self.command);
        self.notes.push(msg);
    }

    pub fn metric(&mut self, r: MetricRecord) {
        eprintln!("[{}] {}", self.command, r.csv_line());
        self.metrics.push(r);
    }

    /// Records a metric that was already echoed while training.
    pub fn metric_quiet(&mut self, r: MetricRecord) {
        self.metrics.push(r);
    }

    pub fn storage(&mut self, v: serde_json::Value) {
        self.storage.push(v);
    }

    pub fn detail(&mut self, key: &str, v: serde_json::Value) {
        self.details.insert(key.to_string(), v);
    }

    pub fn finish(self) -> CliResult<ExperimentReport> {
        let mut csv = Vec::new();
        MetricRecord::write_csv(&self.metrics, &mut csv)?;
        write_atomic(&self.log(METRICS_LOG), &csv)?;
        let mut notes = self.notes.join("\n");
        notes.push('\n');
        write_atomic(&self.log("run.log"), notes.as_bytes())?;
        let report = ExperimentReport {
            command: self.command,
            config_hash: self.config_hash,
            seeds: vec![self.seed],
            wall_time_s: self.start.elapsed().as_secs_f64(),
            metrics: self.metrics,
            storage: self.storage,
            details: self.details,
        };
        let json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
        write_atomic(&self.out.join(REPORT_FILE), &json)?;
        Ok(report)
    }
}
