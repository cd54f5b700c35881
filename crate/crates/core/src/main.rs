use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccac::env::State;
use ccac::harness::commands::{
    cmd_compare, cmd_evaluate, cmd_gap_sim, cmd_timeit, format_compare_table, write_compare_csv, write_gap_csv,
};
use ccac::harness::config::ExperimentConfig;
use ccac::harness::run::cmd_train;

#[derive(Parser)]
#[command(name = "ccac", version, about = "Chance-constrained actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a line every this many iterations (0: silent).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a trained run: joint safe probability and discounted return.
    Evaluate {
        run: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Steps over which joint safety is judged.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean gap over time from a fixed initial state, as CSV.
    GapSim {
        runs: Vec<PathBuf>,
        #[arg(long, num_args = 3, value_names = ["V_E", "V_F", "EPS"], default_values_t = [5.0, 6.0, 6.0])]
        init: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-action latency of a trained controller.
    Timeit {
        run: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
    /// Side-by-side table of evaluated runs.
    Compare {
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> ccac::Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            log_every,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let progress = move |seed: u64, row: &ccac::harness::run::MetricsRow| {
                if log_every > 0 && row.k % log_every == 0 {
                    eprintln!(
                        "seed {seed} k {:>5}  p_hat {:.4}  jc {:.4}  return {:.3}{}",
                        row.k,
                        row.p_hat,
                        row.jc,
                        row.return_est,
                        row.eval_return.map_or(String::new(), |r| format!("  eval {r:.3}"))
                    );
                }
            };
            let manifest = cmd_train(&cfg, Some(&progress))?;
            println!("{}", cfg.output_dir.display());
            for r in &manifest.runs {
                println!("seed {} {:?} ({:.1}s)", r.seed, r.status, r.wall_seconds);
            }
        }
        Cmd::Evaluate {
            run,
            episodes,
            horizon,
            seed,
        } => {
            let report = match seed {
                Some(s) => {
                    let dir = ccac::harness::run::RunDir::open(&run)?;
                    let mut spec = dir.config.eval;
                    spec.seed = s;
                    if let Some(e) = episodes {
                        spec.episodes = e;
                    }
                    if let Some(h) = horizon {
                        spec.safe_horizon = h;
                    }
                    ccac::harness::commands::evaluate_run(&dir, &spec)?
                }
                None => cmd_evaluate(&run, episodes, horizon)?,
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::GapSim {
            runs,
            init,
            repeats,
            steps,
            seed,
            out,
        } => {
            let rows = cmd_gap_sim(&runs, State::new(init[0], init[1], init[2]), repeats, steps, seed)?;
            match out {
                Some(p) => write_gap_csv(&rows, std::fs::File::create(p)?)?,
                None => write_gap_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Cmd::Timeit { run, trials } => {
            let report = cmd_timeit(&run, trials)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Compare { runs, csv } => {
            let rows = cmd_compare(&runs)?;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(format_compare_table(&rows).as_bytes())?;
            if let Some(p) = csv {
                write_compare_csv(&rows, std::fs::File::create(p)?)?;
            }
        }
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
