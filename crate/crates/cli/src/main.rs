use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use warp_core::harness::{
    bench_agents, bench_envs, check_consistency, resolve_workers, run_training, write_csv_rows, write_json,
    CheckOptions, ReportMeta, RunConfig,
};

#[derive(Parser)]
#[command(name = "warp", version, about = "Multi-agent RL engine: consistency checks, benchmarks and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the parallel Tag step against the sequential reference.
    Check(Common),
    /// Rollout throughput against environment count.
    BenchEnvs(Common),
    /// Per-environment step time against agent count.
    BenchAgents(Common),
    /// Train tagger and runner policies.
    Train(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides both the environment and the trainer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `run.out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; takes precedence over WARP_WORKERS and the config.
    #[arg(long)]
    workers: Option<usize>,
}

struct Prepared {
    config: RunConfig,
    workers: usize,
    out: PathBuf,
    meta: ReportMeta,
}

fn prepare(args: &Common) -> Result<Prepared> {
    let mut config =
        RunConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    let env_workers = std::env::var("WARP_WORKERS").ok();
    let workers = resolve_workers(args.workers, env_workers.as_deref(), config.engine.worker_count)?;
    let out = args.out.clone().unwrap_or_else(|| config.run.out_dir.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let meta = ReportMeta::new(&config, workers);
    Ok(Prepared {
        config,
        workers,
        out,
        meta,
    })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Check(args) => {
            let p = prepare(&args)?;
            let report = check_consistency(
                &p.config.env,
                CheckOptions {
                    num_envs: p.config.engine.num_envs,
                    steps: p.config.run.check_steps,
                    workers: p.workers,
                    seed: p.config.trainer.seed,
                    ..Default::default()
                },
                p.meta,
            )?;
            write_json(&p.out.join("consistency.json"), &report)?;
            match &report.first_divergence {
                None => println!(
                    "consistency PASS: {} steps, {} envs x {} agents, {} workers",
                    report.steps_compared, report.num_envs, report.num_agents, p.workers
                ),
                Some(d) => println!(
                    "consistency FAIL at step {} env {} agent {:?} array {} index {} (engine {} vs reference {})",
                    d.step, d.env, d.agent, d.array, d.index, d.engine_value, d.reference_value
                ),
            }
            Ok(report.passed)
        }
        Command::BenchEnvs(args) => {
            let p = prepare(&args)?;
            let report = bench_envs(&p.config, p.workers, p.meta.clone())?;
            write_csv_rows(&p.out.join("bench_envs.csv"), Some(&p.meta), &report.rows)?;
            write_json(&p.out.join("bench_envs.json"), &report)?;
            for row in &report.rows {
                match (row.steps_per_sec, &row.error) {
                    (Some(sps), _) => println!("envs={:<6} steps/sec={sps:.0}", row.num_envs),
                    (None, err) => println!("envs={:<6} failed: {}", row.num_envs, err.as_deref().unwrap_or("?")),
                }
            }
            Ok(report.rows.iter().all(|r| r.error.is_none()))
        }
        Command::BenchAgents(args) => {
            let p = prepare(&args)?;
            let report = bench_agents(&p.config, p.workers, p.meta.clone())?;
            write_csv_rows(&p.out.join("bench_agents.csv"), Some(&p.meta), &report.rows)?;
            write_json(&p.out.join("bench_agents.json"), &report)?;
            for row in &report.rows {
                match row.step_ms {
                    Some(ms) => println!("{:<8} N={:<6} step_ms={ms:.4}", row.obs_mode, row.num_agents),
                    None => println!("{:<8} N={:<6} failed", row.obs_mode, row.num_agents),
                }
            }
            for (mode, slope) in &report.slopes {
                println!("slope[{mode}] = {slope:.3}");
            }
            Ok(report.rows.iter().all(|r| r.error.is_none()))
        }
        Command::Train(args) => {
            let p = prepare(&args)?;
            let report = run_training(&p.config, p.workers, &p.out, p.meta)?;
            for row in &report.rows {
                let rewards: Vec<String> = row
                    .tags
                    .iter()
                    .map(|(tag, m)| match m.mean_episode_reward {
                        Some(r) => format!("{tag}={r:.3}"),
                        None => format!("{tag}=-"),
                    })
                    .collect();
                println!(
                    "iter {:>5}  {:>9.0} steps/s  {}",
                    row.iteration,
                    row.steps_per_sec,
                    rewards.join("  ")
                );
            }
            println!("wrote {}", p.out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
