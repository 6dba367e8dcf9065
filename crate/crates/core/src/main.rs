//! Command-line front end: runs a scenario against either autoscaling
//! policy and writes run artifacts, or compares two finished runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vasim::control::OptimizerMode;
use vasim::domain::{load_scenario, Baseline};
use vasim::harness::{compare_runs, emit_plot_data, load_summary, run_scenario, write_artifacts};
use vasim::metrics_io::discover_capacity;

#[derive(Parser)]
#[command(name = "vasim", about = "Closed-loop autoscaling simulator for LLM inference serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Wva,
    Hpa,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Constrained,
    Unconstrained,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write artifacts to the output directory.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario's autoscaling policy.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, value_enum, default_value = "constrained")]
        optimizer_mode: ModeArg,
        /// GPU inventory CSV; caps per-hardware-class growth in constrained mode.
        #[arg(long)]
        inventory: Option<PathBuf>,
    },
    /// Compare two finished run directories phase by phase.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<(), String> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            out,
            seed,
            baseline,
            optimizer_mode,
            inventory,
        } => {
            let source = std::fs::read(&scenario)
                .map_err(|e| format!("reading {}: {e}", scenario.display()))?;
            let mut cfg = load_scenario(&scenario).map_err(|e| e.to_string())?;
            if let Some(seed) = seed {
                cfg.rng_seed = seed;
            }
            if let Some(b) = baseline {
                cfg.baseline = match b {
                    BaselineArg::Wva => Baseline::Wva,
                    BaselineArg::Hpa => Baseline::Hpa,
                };
            }
            let mode = match optimizer_mode {
                ModeArg::Constrained => OptimizerMode::Constrained,
                ModeArg::Unconstrained => OptimizerMode::Unconstrained,
            };
            if let Some(path) = &inventory {
                let inv = discover_capacity(path).map_err(|e| e.to_string())?;
                if cfg.cluster_gpu_budget.is_none() {
                    cfg.cluster_gpu_budget = Some(inv.cluster_gpu_budget());
                }
            }

            let result = run_scenario(&cfg, mode, Some(&source)).map_err(|e| e.to_string())?;
            write_artifacts(&result, &out).map_err(|e| e.to_string())?;
            let warnings = emit_plot_data(&out, &out.join("plots")).map_err(|e| e.to_string())?;
            for w in warnings {
                eprintln!("warning: {w}");
            }

            let t = &result.summary.totals;
            println!(
                "{} run: {} arrived, {} completed, {} dropped (mean ttft {}, mean replicas {:.2})",
                match cfg.baseline {
                    Baseline::Wva => "wva",
                    Baseline::Hpa => "hpa",
                },
                t.arrived,
                t.completed,
                t.dropped,
                t.mean_ttft
                    .map(|v| format!("{v:.3}s"))
                    .unwrap_or_else(|| "n/a".into()),
                t.mean_replicas,
            );
            println!("artifacts written to {}", out.display());
            Ok(())
        }
        Command::Compare { dir_a, dir_b } => {
            let a = load_summary(&dir_a).map_err(|e| e.to_string())?;
            let b = load_summary(&dir_b).map_err(|e| e.to_string())?;
            let rows = compare_runs(&a, &b).map_err(|e| e.to_string())?;
            println!(
                "{:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "rps", "thr_a", "thr_b", "d_thr%", "drops_a", "drops_b", "reps_a", "reps_b"
            );
            for r in &rows {
                println!(
                    "{:>6.1} {:>8.3} {:>8.3} {:>8} {:>8} {:>8} {:>8.2} {:>8.2}",
                    r.rps_target,
                    r.throughput_a,
                    r.throughput_b,
                    r.throughput_pct
                        .map(|p| format!("{:+.1}", p * 100.0))
                        .unwrap_or_else(|| "n/a".into()),
                    r.drops_a,
                    r.drops_b,
                    r.mean_replicas_a,
                    r.mean_replicas_b,
                );
            }
            let mut w = csv::Writer::from_path("comparison.csv").map_err(|e| e.to_string())?;
            for r in &rows {
                w.serialize(r).map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())?;
            println!("comparison table written to comparison.csv");
            Ok(())
        }
    }
}
