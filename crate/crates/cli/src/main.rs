use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use screener_core::harness::{self, calibrate, plot, report, Experiment, LabeledProtocol, Optimizer};
use screener_core::TaskKind;

/// Task-driven b-value protocol design for IVIM diffusion MRI.
#[derive(Debug, Parser)]
#[command(name = "screener", version)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true, default_value = "configs/experiment.toml")]
    config: PathBuf,

    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the SNR. Repeat for several values with `sweep-snr`.
    #[arg(long, global = true)]
    snr: Vec<f64>,

    /// Protocol: `adhoc`, a protocol.json file, or `[label=]b0,b1,...`.
    /// May be repeated.
    #[arg(long, global = true)]
    protocol: Vec<String>,

    /// Output directory (or file, for `plot` and `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    task: Option<TaskKind>,

    #[arg(long, global = true)]
    optimizer: Option<Optimizer>,

    /// PPO steps, annealing iterations or calibration evaluations.
    #[arg(long, global = true)]
    budget: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-parameter AUCs of the ad hoc protocol on the binary tasks.
    Validate,
    /// Fit the tissue priors to the configured targets.
    Calibrate,
    /// 50-repeat accuracy of protocols on one or all tasks.
    Evaluate,
    /// Search for a protocol with the chosen optimizer.
    Optimize,
    /// Accuracy of protocols across SNRs.
    SweepSnr,
    /// Render a report.csv (accuracy vs SNR) or curve.csv as SVG.
    Plot { input: PathBuf },
    /// Summarize report.csv files as a Markdown table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn single_snr(cli: &Cli) -> Result<Option<f64>> {
    match cli.snr.as_slice() {
        [] => Ok(None),
        [s] => Ok(Some(*s)),
        _ => bail!("--snr may be given several times only for sweep-snr"),
    }
}

fn load(cli: &Cli) -> Result<Experiment> {
    let mut exp = Experiment::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        exp = exp.with_seed(seed);
    }
    Ok(exp)
}

fn protocols(cli: &Cli) -> Result<Vec<LabeledProtocol>> {
    if cli.protocol.is_empty() {
        return Ok(vec![LabeledProtocol::ad_hoc()]);
    }
    cli.protocol
        .iter()
        .map(|p| LabeledProtocol::resolve(p).with_context(|| format!("protocol '{p}'")))
        .collect()
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn finish(rows: &[report::ReportRow], dir: &Path) -> Result<()> {
    let path = dir.join("report.csv");
    report::write_report(&path, rows)?;
    print!("{}", report::render_markdown(rows)?);
    info!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Validate => {
            let mut exp = load(cli)?;
            if let Some(snr) = single_snr(cli)? {
                exp.config.validation_snr = snr;
                exp.config.validate()?;
            }
            let dir = out_dir(cli)?;
            finish(&harness::validate(&exp)?, &dir)
        }
        Command::Calibrate => {
            let exp = load(cli)?;
            let dir = out_dir(cli)?;
            let budget = cli.budget.map_or(exp.config.calibrate.max_evaluations, |b| b as usize);
            let res = calibrate::calibrate(&exp, budget)?;
            let path = dir.join("tissue_distributions.toml");
            res.distributions.save(&path)?;
            report::write_trace(&dir.join("curve.csv"), "best_loss", &res.trace, &exp.hash(), exp.seed())?;
            println!("loss {:.5} after {} evaluations", res.point.loss, res.trace.len());
            for (task, a) in &res.point.aucs {
                println!("auc {task}: f {:.3} D {:.3} D* {:.3}", a[0], a[1], a[2]);
            }
            for (task, p, v) in &res.point.accuracies {
                println!("accuracy {task} [{p}]: {v:.3}");
            }
            info!("wrote {}", path.display());
            Ok(())
        }
        Command::Evaluate => {
            let mut exp = load(cli)?;
            if let Some(snr) = single_snr(cli)? {
                exp = exp.with_snr(snr)?;
            }
            let mut ps = protocols(cli)?;
            if let Some(o) = cli.optimizer {
                if o == Optimizer::Crlb {
                    let task = cli.task.unwrap_or(TaskKind::MultiClass);
                    let res = harness::crlb_protocol(&exp, task, None, cli.budget)?;
                    ps.push(LabeledProtocol { label: "crlb".into(), protocol: res.protocol });
                } else if o == Optimizer::Screener {
                    bail!("evaluate cannot train; run `optimize --optimizer screener` and pass its protocol.json");
                }
            }
            let tasks = match cli.task {
                Some(t) => vec![t],
                None => vec![TaskKind::BinaryActiveChronic, TaskKind::BinaryActiveHealthy, TaskKind::BinaryChronicHealthy, TaskKind::MultiClass],
            };
            let dir = out_dir(cli)?;
            finish(&harness::evaluate(&exp, &ps, &tasks)?, &dir)
        }
        Command::Optimize => {
            let mut exp = load(cli)?;
            if let Some(snr) = single_snr(cli)? {
                exp = exp.with_snr(snr)?;
            }
            let optimizer = cli.optimizer.context("optimize needs --optimizer")?;
            let task = cli.task.context("optimize needs --task")?;
            let dir = out_dir(cli)?;
            let out = harness::optimize(&exp, optimizer, task, cli.budget, &dir)?;
            println!("{} protocol: {}", out.artifact.optimizer, out.artifact.protocol);
            if let Some(g) = &out.greedy {
                println!("greedy protocol: {}", g.protocol);
            }
            finish(&out.rows, &dir)
        }
        Command::SweepSnr => {
            let exp = load(cli)?;
            let snrs = if cli.snr.is_empty() { exp.config.sweep.snrs.clone() } else { cli.snr.clone() };
            let mut ps = protocols(cli)?;
            if !ps.iter().any(|p| p.protocol == screener_core::AcquisitionProtocol::ad_hoc()) {
                ps.insert(0, LabeledProtocol::ad_hoc());
            }
            let task = cli.task.unwrap_or(TaskKind::MultiClass);
            let dir = out_dir(cli)?;
            finish(&harness::sweep_snr(&exp, &ps, task, &snrs)?, &dir)
        }
        Command::Plot { input } => {
            let header = std::fs::read_to_string(input)
                .with_context(|| format!("reading {}", input.display()))?
                .lines()
                .next()
                .unwrap_or_default()
                .to_string();
            let chart = if header.contains("mean_episode_reward") {
                plot::curve_chart(&report::read_curve(input)?)?
            } else {
                let task = cli.task.map(|t| t.to_string());
                plot::snr_chart(&report::read_report(input)?, task.as_deref())?
            };
            let out = cli.out.clone().unwrap_or_else(|| input.with_extension("svg"));
            std::fs::write(&out, chart.to_svg()?)?;
            info!("wrote {}", out.display());
            Ok(())
        }
        Command::Report { inputs } => {
            let mut rows = Vec::new();
            for p in inputs {
                rows.extend(report::read_report(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let md = report::render_markdown(&rows)?;
            match &cli.out {
                Some(path) => std::fs::write(path, md)?,
                None => print!("{md}"),
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
