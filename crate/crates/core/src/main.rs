use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use arena::config::{load_config_file, RunConfig};
use arena::metrics::read_metrics;
use arena::orchestrator::multiprocess::node_main;
use arena::plot::{score_curves, trace_paths};
use arena::routing::plan_summary;
use arena::run::{evaluate, read_trace, resolve_transport, resume as resume_run, train, write_trace, RunPaths};

#[derive(Parser)]
#[command(name = "arena", about = "Multi-entity RL training over lock-step environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the process plan a config resolves to.
    Plan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run every round of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run all nodes in one thread, in lock-step.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out trained checkpoints and write a position trace CSV.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: u64,
        /// Defaults to `<output_dir>/checkpoints`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render score curves (from metrics) or paths (from a trace) to SVG.
    Plot {
        #[arg(long, conflicts_with = "trace", required_unless_present = "trace")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: u64,
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(hide = true)]
    Node {
        #[arg(long)]
        hub: String,
    },
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, String> {
    let mut cfg = load_config_file(path).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Plan { config } => {
            let plan = load(&config, None)?.plan().map_err(|e| e.to_string())?;
            print!("{}", plan_summary(&plan));
            println!("total: {} nodes", plan.node_count());
        }
        Command::Train { config, deterministic, seed, output, resume } => {
            let mut cfg = load(&config, seed)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let paths = RunPaths::new(&cfg.output_dir);
            let exe = std::env::current_exe().map_err(|e| e.to_string())?;
            let transport = resolve_transport(&cfg, deterministic, &exe, &paths.logs).map_err(|e| e.to_string())?;
            let run = if resume { resume_run } else { train };
            let reports = run(&cfg, &cfg.output_dir, transport).map_err(|e| e.to_string())?;
            for r in &reports {
                let scores: Vec<String> = r
                    .policies
                    .iter()
                    .map(|(p, s)| format!("{p}={}", s.mean_score.map_or("-".into(), |m| format!("{m:.2}"))))
                    .collect();
                println!("round {}: {} steps, {} episodes, {:.1}s, {}", r.round_index, r.steps, r.env_episodes, r.wall_time, scores.join(" "));
            }
            println!("metrics: {}", paths.metrics.display());
        }
        Command::Eval { config, episodes, checkpoints, out } => {
            let cfg = load(&config, None)?;
            let dir = checkpoints.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).checkpoints);
            let rows = evaluate(&cfg, &dir, episodes).map_err(|e| e.to_string())?;
            write_trace(&out, &rows).map_err(|e| e.to_string())?;
            println!("{} trace rows -> {}", rows.len(), out.display());
        }
        Command::Plot { metrics, trace, episode, window, title, out } => {
            let svg = match (metrics, trace) {
                (Some(m), _) => {
                    let rows = read_metrics(&m).map_err(|e| e.to_string())?;
                    score_curves(&rows, title.as_deref().unwrap_or("episode score"), window)
                }
                (None, Some(t)) => {
                    let rows = read_trace(&t).map_err(|e| e.to_string())?;
                    trace_paths(&rows, episode, title.as_deref().unwrap_or("positions"))
                }
                (None, None) => return Err("one of --metrics or --trace is required".into()),
            };
            std::fs::write(&out, svg).map_err(|e| format!("{}: {e}", out.display()))?;
        }
        Command::Node { hub } => node_main(&hub).map_err(|e| e.to_string())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
