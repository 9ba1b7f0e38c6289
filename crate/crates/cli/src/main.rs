use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use qdcsim_cli::commands::{nonincreasing_then_flat, parse_values};
use qdcsim_cli::{cmd_compare, cmd_run, cmd_sweep, Axis, ExperimentConfig};

/// Quantum data center EPR scheduling simulator
#[derive(Parser, Debug)]
#[command(name = "qdcsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one config with its configured strategy
    Run(Common),
    /// Run the baseline and the flexible scheduler on the same demands
    Compare(Common),
    /// Compare across the values of one parameter
    Sweep {
        #[command(flatten)]
        common: Common,
        /// buffer_size, lookahead, comm_qubits, cross_latency,
        /// in_rack_latency, cross_fidelity or distill_k
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 1,2,3
        #[arg(long)]
        values: String,
    },
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output.dir`
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir());
        Ok((cfg, out))
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let r = cmd_run(&cfg, &out)?;
            println!(
                "{} [{}] latency {:.4} weighted EPR {:.4} wait {:.4} -> {}",
                r.config_id,
                r.final_strategy,
                r.normalized_latency,
                r.weighted_epr,
                r.avg_wait,
                out.display()
            );
        }
        Command::Compare(c) => {
            let (cfg, out) = c.load()?;
            let r = cmd_compare(&cfg, &out)?;
            println!(
                "{}: baseline {:.4} ours {:.4} improvement {:.3}x EPR overhead {:.2}% -> {}",
                r.config_id,
                r.baseline_latency,
                r.ours_latency,
                r.improvement_factor,
                100.0 * r.epr_overhead,
                out.display()
            );
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, out) = common.load()?;
            let axis: Axis = axis.parse()?;
            let values = parse_values(&values)?;
            let rows = cmd_sweep(&cfg, axis, &values, &out)?;
            for r in &rows {
                println!(
                    "{} = {}: baseline {:.4} ours {:.4} improvement {:.3}x",
                    r.axis, r.value, r.baseline_latency, r.ours_latency, r.improvement_factor
                );
            }
            if axis == Axis::Lookahead {
                let series: Vec<f64> = rows.iter().map(|r| r.ours_latency).collect();
                let ok = nonincreasing_then_flat(&series, 0.01);
                println!("lookahead trend nonincreasing then flat: {ok}");
            }
            println!("-> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
