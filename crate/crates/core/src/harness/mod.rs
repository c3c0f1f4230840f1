//! Experiment orchestration.
//!
//! Each command takes a loaded [`Experiment`], does its work under seeds
//! derived from the experiment seed, and returns report rows. Commands
//! that produce files write them under an output directory.

pub mod calibrate;
pub mod config;
pub mod plot;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crlb::{draw_tissue_samples, optimize_crlb_with_samples, CrlbOutcome};
use crate::drl::env::{EnvConfig, ProtocolEnv};
use crate::drl::{rollout_greedy, Trainer};
use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{AcquisitionProtocol, IvimParams};
use crate::task::{evaluate_protocol, repeated_aucs, TaskKind};

pub use config::{Experiment, ExperimentConfig};
use report::{Checkpoint, ProtocolArtifact, ReportRow, ARTIFACT_SCHEMA_VERSION, CHECKPOINT_FORMAT_VERSION, REPORT_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adhoc,
    Crlb,
    Screener,
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adhoc => "adhoc",
            Self::Crlb => "crlb",
            Self::Screener => "screener",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adhoc" | "ad-hoc" => Ok(Self::Adhoc),
            "crlb" => Ok(Self::Crlb),
            "screener" => Ok(Self::Screener),
            _ => Err(Error::Config(format!("unknown optimizer '{s}' (adhoc, crlb, screener)"))),
        }
    }
}

/// A protocol with the label it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProtocol {
    pub label: String,
    pub protocol: AcquisitionProtocol,
}

impl LabeledProtocol {
    pub fn ad_hoc() -> Self {
        Self { label: Optimizer::Adhoc.to_string(), protocol: AcquisitionProtocol::ad_hoc() }
    }

    /// `adhoc`, a path to a protocol artifact, or a comma-separated
    /// b-value list (optionally `label=0,10,...`).
    pub fn resolve(arg: &str) -> Result<Self> {
        if arg.eq_ignore_ascii_case("adhoc") {
            return Ok(Self::ad_hoc());
        }
        let path = Path::new(arg);
        if path.extension().is_some_and(|e| e == "json") || path.is_file() {
            let a = ProtocolArtifact::load(path)?;
            return Ok(Self { label: a.optimizer, protocol: a.protocol });
        }
        let (label, literal) = arg.split_once('=').unwrap_or(("literal", arg));
        Ok(Self { label: label.to_string(), protocol: AcquisitionProtocol::parse(literal)? })
    }
}

fn row(exp: &Experiment, command: &str, task: TaskKind, p: &LabeledProtocol, snr: f64, metric: &str, mean: f64, std: f64, n: usize) -> ReportRow {
    ReportRow {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: exp.hash(),
        seed: exp.seed(),
        command: command.into(),
        task: task.to_string(),
        optimizer: p.label.clone(),
        snr,
        protocol: p.protocol.to_string(),
        metric: metric.into(),
        mean,
        std,
        n_repeats: n,
    }
}

/// Per-parameter AUCs of the ad hoc protocol on the binary tasks at the
/// validation SNR.
pub fn validate(exp: &Experiment) -> Result<Vec<ReportRow>> {
    let snr = exp.config.validation_snr;
    let env = exp.task_env_at(snr);
    let n = exp.config.eval.n_repeats_report;
    let adhoc = LabeledProtocol::ad_hoc();
    let mut rows = Vec::new();
    for task in TaskKind::BINARY {
        let aucs = repeated_aucs(&adhoc.protocol, task, &env, n, seed::derive_named(exp.seed(), "validate"))?;
        for (name, (m, s)) in ["auc_f", "auc_d", "auc_dstar"].iter().zip(aucs) {
            rows.push(row(exp, "validate", task, &adhoc, snr, name, m, s, n));
        }
    }
    Ok(rows)
}

/// Reporting-mode accuracy of each protocol on each task at `snr`. All
/// protocols see the same cohorts.
pub fn evaluate_at(exp: &Experiment, command: &str, protocols: &[LabeledProtocol], tasks: &[TaskKind], snr: f64) -> Result<Vec<ReportRow>> {
    let env = exp.task_env_at(snr);
    let n = exp.config.eval.n_repeats_report;
    let s = seed::derive_named(exp.seed(), "evaluate");
    let mut rows = Vec::new();
    for &task in tasks {
        for p in protocols {
            let acc = evaluate_protocol(&p.protocol, task, &env, &exp.config.eval, n, s)?;
            rows.push(row(exp, command, task, p, snr, "accuracy", acc.mean, acc.std, n));
        }
    }
    Ok(rows)
}

pub fn evaluate(exp: &Experiment, protocols: &[LabeledProtocol], tasks: &[TaskKind]) -> Result<Vec<ReportRow>> {
    evaluate_at(exp, "evaluate", protocols, tasks, exp.config.scanner.snr)
}

/// Accuracy of each protocol across the configured SNRs (or `snrs`).
pub fn sweep_snr(exp: &Experiment, protocols: &[LabeledProtocol], task: TaskKind, snrs: &[f64]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &snr in snrs {
        rows.extend(evaluate_at(exp, "sweep-snr", protocols, &[task], snr)?);
    }
    Ok(rows)
}

/// CRLB protocol for `task`. With `samples` given the task plays no
/// part; otherwise tissue is drawn from the task's classes.
pub fn crlb_protocol(exp: &Experiment, task: TaskKind, samples: Option<&[IvimParams]>, iterations: Option<u64>) -> Result<CrlbOutcome> {
    let mut cfg = exp.config.crlb;
    if let Some(it) = iterations {
        cfg.iterations = it as usize;
    }
    let mut rng = seed::rng_from(seed::derive_named(exp.seed(), "crlb-samples"));
    let drawn;
    let samples = match samples {
        Some(s) => s,
        None => {
            drawn = draw_tissue_samples(&exp.distributions, task.classes(), cfg.n_tissue_samples, &mut rng)?;
            &drawn
        }
    };
    let mut rng = seed::rng_from(seed::derive_named(exp.seed(), "crlb-anneal"));
    optimize_crlb_with_samples(samples, &exp.config.scanner, &cfg, &mut rng)
}

/// Files written by `optimize`.
#[derive(Debug, Clone)]
pub struct OptimizeOutput {
    pub artifact: ProtocolArtifact,
    pub greedy: Option<ProtocolArtifact>,
    pub rows: Vec<ReportRow>,
    pub files: Vec<PathBuf>,
}

/// Run one optimizer for `task`, write `protocol.json`, `curve.csv`
/// (and for PPO `checkpoints/`), and evaluate the result against ad hoc.
pub fn optimize(exp: &Experiment, optimizer: Optimizer, task: TaskKind, budget: Option<u64>, out: &Path) -> Result<OptimizeOutput> {
    std::fs::create_dir_all(out)?;
    let hash = exp.hash();
    let snr = exp.config.scanner.snr;
    let artifact = |protocol: AcquisitionProtocol, label: &str, objective: f64, budget: u64| ProtocolArtifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config_hash: hash.clone(),
        seed: exp.seed(),
        optimizer: label.to_string(),
        task: task.to_string(),
        snr,
        te: protocol.te(&exp.config.scanner),
        protocol,
        objective,
        budget,
    };
    let mut files = Vec::new();
    let curve_path = out.join("curve.csv");
    let (best, greedy) = match optimizer {
        Optimizer::Adhoc => (artifact(AcquisitionProtocol::ad_hoc(), "adhoc", f64::NAN, 0), None),
        Optimizer::Crlb => {
            let it = budget.unwrap_or(exp.config.crlb.iterations as u64);
            let res = crlb_protocol(exp, task, None, Some(it))?;
            report::write_trace(&curve_path, "best_cost", &res.trace, &hash, exp.seed())?;
            files.push(curve_path.clone());
            (artifact(res.protocol, "crlb", res.cost, it), None)
        }
        Optimizer::Screener => {
            let steps = budget.unwrap_or(exp.config.train.total_steps);
            let env = ProtocolEnv::new(
                EnvConfig { task, task_env: exp.task_env(), eval: exp.config.eval },
                seed::derive_named(exp.seed(), "reward"),
            );
            let mut trainer = Trainer::new(env, exp.config.ppo, seed::derive_named(exp.seed(), "ppo"))?;
            let ckpt_dir = out.join("checkpoints");
            std::fs::create_dir_all(&ckpt_dir)?;
            let every = exp.config.train.checkpoint_every;
            let checkpoint = |t: &Trainer<ProtocolEnv>| Checkpoint {
                format_version: CHECKPOINT_FORMAT_VERSION,
                config_hash: hash.clone(),
                seed: exp.seed(),
                step: t.steps,
                agent: t.agent.clone(),
                rng: t.rng.clone(),
                best_episode: t.best.as_ref().map(|b| b.1.clone()),
                curve: t.curve.clone(),
            };
            trainer.run(steps, |t| {
                if every > 0 && t.curve.len() % every == 0 {
                    checkpoint(t).save(&ckpt_dir.join(format!("step_{:08}.json", t.steps)))?;
                }
                Ok(())
            })?;
            let final_path = ckpt_dir.join("final.json");
            checkpoint(&trainer).save(&final_path)?;
            files.push(final_path);
            report::write_curve(&curve_path, &trainer.curve, &hash, exp.seed())?;
            files.push(curve_path.clone());
            let outcome = trainer.outcome();
            let greedy = rollout_greedy(&outcome.agent, snr)?;
            let reward = outcome.best_episode.as_ref().map_or(f64::NAN, |e| e.reward);
            (artifact(outcome.best_protocol, "screener", reward, steps), Some(artifact(greedy, "screener-greedy", f64::NAN, steps)))
        }
    };
    let path = out.join("protocol.json");
    best.save(&path)?;
    files.push(path);
    let mut candidates = vec![LabeledProtocol::ad_hoc()];
    if optimizer != Optimizer::Adhoc {
        candidates.push(LabeledProtocol { label: best.optimizer.clone(), protocol: best.protocol.clone() });
    }
    if let Some(g) = &greedy {
        let path = out.join("protocol_greedy.json");
        g.save(&path)?;
        files.push(path);
        candidates.push(LabeledProtocol { label: g.optimizer.clone(), protocol: g.protocol.clone() });
    }
    let rows = evaluate_at(exp, "optimize", &candidates, &[task], snr)?;
    Ok(OptimizeOutput { artifact: best, greedy, rows, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_names_round_trip() {
        for o in [Optimizer::Adhoc, Optimizer::Crlb, Optimizer::Screener] {
            assert_eq!(o.as_str().parse::<Optimizer>().unwrap(), o);
        }
        assert!("sgd".parse::<Optimizer>().is_err());
    }

    #[test]
    fn protocol_resolution() {
        assert_eq!(LabeledProtocol::resolve("adhoc").unwrap(), LabeledProtocol::ad_hoc());
        let p = LabeledProtocol::resolve("ref=0,212,254,272,356,530,600,731,929,959").unwrap();
        assert_eq!(p.label, "ref");
        assert_eq!(p.protocol.b_max(), 959.0);
        let q = LabeledProtocol::resolve("0,0,7,7,7,7,52,52,52,508").unwrap();
        assert_eq!(q.label, "literal");
        assert!(LabeledProtocol::resolve("missing.json").is_err());
        assert!(LabeledProtocol::resolve("10,20").is_err());
    }
}
