//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::dql::{load_checkpoint, save_checkpoint, Checkpoint, Summary};
use crate::harness::{
    evaluation_seeds, reward_plot_script, run_inference, run_optimal, run_sweep, run_training, summarize_sweep,
    sweep_plot_script, verify_gradients, verify_linearization, verify_solvers, write_csv_file, ObjectiveRecord,
    ScenarioConfig, SweepAxis, SweepSpec,
};
use crate::solver::{default_big_m, export_lp};

#[derive(Parser, Debug)]
#[command(name = "mec-migrate", version, about = "Service placement and migration for vehicular edge computing")]
struct Cli {
    /// Scenario file (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the scenario file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one double-DQN agent per server; writes reward_log.csv and checkpoint.json.
    Train {
        /// Overrides the number of training episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Greedy inference on the evaluation instances, next to the exact optimum; writes objective.csv.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Exact optimum of every evaluation instance; writes objective.csv.
    Optimal,
    /// Objective versus computing power or request size; writes sweep.csv and sweep_summary.csv.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        /// Also evaluate a trained policy on every cell.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linearized program of the first evaluation instance in LP format.
    ExportLp {
        #[arg(long)]
        big_m: Option<f64>,
    },
    /// Runs the solver, linearization and gradient property suites.
    Verify,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Cores,
    RequestSize,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut cfg = match &cli.config {
        None => ScenarioConfig::default(),
        Some(path) if !path.exists() => {
            eprintln!("error: config file {} not found", path.display());
            return 2;
        }
        Some(path) => match ScenarioConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: cannot load {}: {e}", path.display());
                return 2;
            }
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match execute(&cli, cfg) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn execute(cli: &Cli, mut cfg: ScenarioConfig) -> anyhow::Result<bool> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = |name: &str| cli.out.join(name);
    let seeds = evaluation_seeds(cfg.seed, cfg.eval_episodes);
    match &cli.command {
        Command::Train { episodes } => {
            if let Some(e) = episodes {
                cfg.dql.episodes = *e;
            }
            let total = cfg.dql.episodes;
            let report_every = (total / 10).max(1);
            let outcome = run_training(&cfg, |episode, rows| {
                if (episode + 1) % report_every == 0 || episode + 1 == total {
                    let mean = rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len() as f64;
                    eprintln!(
                        "episode {}/{total}  epsilon {:.3}  feasible {:.2}  mean reward {mean:.4}",
                        episode + 1,
                        rows[0].epsilon,
                        rows[0].feasible_fraction
                    );
                }
            })?;
            write_csv_file(&out("reward_log.csv"), &outcome.log)?;
            save_checkpoint(&Checkpoint::from_agents(&outcome.agents, outcome.steps), &out("checkpoint.json"))?;
            fs::write(out("reward_log.gp"), reward_plot_script(cfg.servers))?;
            println!("wrote {}", cli.out.display());
        }
        Command::Infer { checkpoint } => {
            let nets = load_nets(checkpoint)?;
            let learned = run_inference(&cfg, &nets, &seeds)?;
            let optimal = run_optimal(&cfg, &seeds)?;
            let mean = |rows: &[ObjectiveRecord]| Summary::of(rows.iter().map(|r| r.total)).mean;
            println!(
                "dql mean total {:.6}  optimal mean total {:.6}  ratio {:.4}",
                mean(&learned),
                mean(&optimal),
                mean(&learned) / mean(&optimal)
            );
            write_csv_file(&out("objective.csv"), &[learned, optimal].concat())?;
        }
        Command::Optimal => {
            let rows = run_optimal(&cfg, &seeds)?;
            let s = Summary::of(rows.iter().map(|r| r.total));
            println!("optimal mean total {:.6} (std {:.6}) over {} instances", s.mean, s.std_dev, rows.len());
            write_csv_file(&out("objective.csv"), &rows)?;
        }
        Command::Sweep {
            axis,
            replications,
            checkpoint,
        } => {
            let axis = match axis {
                Axis::Cores => SweepAxis::Cores,
                Axis::RequestSize => SweepAxis::RequestSize,
            };
            let nets = checkpoint.as_deref().map(load_nets).transpose()?;
            let rows = run_sweep(&cfg, &SweepSpec::standard(axis, *replications), nets.as_deref())?;
            let summary = summarize_sweep(&rows);
            for s in &summary {
                println!("{:>10} {:>8} mean total {:.6}", s.level, s.method, s.mean_total);
            }
            write_csv_file(&out("sweep.csv"), &rows)?;
            write_csv_file(&out("sweep_summary.csv"), &summary)?;
            fs::write(out("sweep.gp"), sweep_plot_script(axis))?;
        }
        Command::ExportLp { big_m } => {
            let inst = cfg.instance(seeds[0])?;
            let m = big_m.unwrap_or_else(|| default_big_m(&inst));
            let path = out("problem.lp");
            fs::write(&path, export_lp(&inst, m)?)?;
            println!("wrote {}", path.display());
        }
        Command::Verify => return Ok(verify(&cfg)?),
    }
    Ok(true)
}

fn load_nets(path: &Path) -> anyhow::Result<Vec<crate::neural::QNetwork>> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    Ok(load_checkpoint(path)?.networks()?)
}

fn verify(cfg: &ScenarioConfig) -> crate::Result<bool> {
    let solvers = verify_solvers(cfg, 17, 1e-9)?;
    let lin = verify_linearization(cfg, 102)?;
    let grads = verify_gradients(cfg, 20, 40)?;
    let checks = [
        (
            "exact solvers agree",
            solvers.failures == 0,
            format!("{} instances, max relative gap {:.3e}", solvers.instances, solvers.max_relative_gap),
        ),
        (
            "linearization consistent",
            lin.inconsistent == 0 && lin.count_mismatches == 0,
            format!("{} pairs, {} count mismatches", lin.pairs, lin.count_mismatches),
        ),
        (
            "gradients match finite differences",
            grads.max_relative_error < 1e-4,
            format!("{} networks, max relative error {:.3e}", grads.networks, grads.max_relative_error),
        ),
    ];
    let mut ok = true;
    for (name, passed, detail) in checks {
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        ok &= passed;
    }
    Ok(ok)
}
