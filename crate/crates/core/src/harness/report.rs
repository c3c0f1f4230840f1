//! Versioned result files: report rows, protocol artifacts, curves and
//! checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::drl::env::Episode;
use crate::drl::{CurvePoint, PpoAgent};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::signal::AcquisitionProtocol;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// One measurement. `metric` is `accuracy`, `auc_f`, `auc_d` or
/// `auc_dstar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub command: String,
    pub task: String,
    pub optimizer: String,
    pub snr: f64,
    pub protocol: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_repeats: usize,
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| r.schema_version != REPORT_SCHEMA_VERSION) {
        return Err(Error::SchemaMismatch { found: bad.schema_version, expected: REPORT_SCHEMA_VERSION });
    }
    Ok(rows)
}

/// Markdown table, one line per (command, task, snr, optimizer,
/// protocol) with metrics as columns.
pub fn render_markdown(rows: &[ReportRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyReport("no rows".into()));
    }
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    type Key<'a> = (&'a str, &'a str, String, &'a str, &'a str);
    let mut table: BTreeMap<Key, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for r in rows {
        let key = (r.command.as_str(), r.task.as_str(), format!("{}", r.snr), r.optimizer.as_str(), r.protocol.as_str());
        if !table.contains_key(&key) {
            order.push(key.clone());
        }
        table.entry(key).or_default().insert(&r.metric, (r.mean, r.std));
    }
    let mut out = String::new();
    writeln!(out, "| command | task | snr | optimizer | protocol | {} |", metrics.join(" | ")).unwrap();
    writeln!(out, "|---|---|---|---|---|{}", "---|".repeat(metrics.len())).unwrap();
    for key in order {
        let cells: Vec<String> = metrics
            .iter()
            .map(|m| table[&key].get(m).map_or("".into(), |(mean, std)| format!("{mean:.3} ± {std:.3}")))
            .collect();
        writeln!(out, "| {} | {} | {} | {} | {} | {} |", key.0, key.1, key.2, key.3, key.4, cells.join(" | ")).unwrap();
    }
    let hashes: Vec<&str> = {
        let mut h: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
        h.dedup();
        h
    };
    writeln!(out, "\nconfig hash: {}; seed: {}", hashes.join(", "), rows[0].seed).unwrap();
    Ok(out)
}

/// Protocol file written by `optimize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub optimizer: String,
    pub task: String,
    pub snr: f64,
    pub protocol: AcquisitionProtocol,
    pub te: f64,
    /// Final optimizer objective: best reward or best CRLB cost.
    pub objective: f64,
    pub budget: u64,
}

impl ProtocolArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if a.schema_version != ARTIFACT_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch { found: a.schema_version, expected: ARTIFACT_SCHEMA_VERSION });
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    config_hash: String,
    seed: u64,
    step: u64,
    mean_episode_reward: f64,
    best_reward: f64,
}

pub fn write_curve(path: &Path, curve: &[CurvePoint], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(CurveRow {
            config_hash: config_hash.into(),
            seed,
            step: p.step,
            mean_episode_reward: p.mean_episode_reward,
            best_reward: p.best_reward,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<CurveRow>()
        .map(|row| {
            let row = row?;
            Ok(CurvePoint { step: row.step, mean_episode_reward: row.mean_episode_reward, best_reward: row.best_reward })
        })
        .collect()
}

/// Per-iteration optimizer trace: `config_hash,seed,iteration,<column>`.
pub fn write_trace(path: &Path, column: &str, values: &[f64], config_hash: &str, seed: u64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["config_hash", "seed", "iteration", column])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([config_hash.to_string(), seed.to_string(), (i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to inspect or continue a PPO run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub agent: PpoAgent,
    pub rng: Rng,
    pub best_episode: Option<Episode>,
    pub curve: Vec<CurvePoint>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let c: Self = serde_json::from_reader(file)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::SchemaMismatch { found: c.format_version, expected: CHECKPOINT_FORMAT_VERSION });
        }
        Ok(c)
    }
}
