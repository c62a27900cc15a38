//! Command-line interface: simulate the cascaded observers, check
//! observability of the configured trajectory, or sweep a parameter.
//! Failures print one machine-readable JSON line to stderr and exit nonzero.

use clap::{Args, Parser, Subcommand};
use mononav::harness::{
    check_observability, run_scenario, run_sweep, write_observability, write_outputs,
    write_sweep_csv, HarnessError, ScenarioConfig, SweepAxis,
};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "mononav",
    version,
    about = "Cascaded landmark/velocity/gravity and pose estimation from IMU + monocular bearings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario configuration file (TOML); omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run truth + both observers and write truth/ltv/pose/landmarks CSVs.
    Simulate(CommonArgs),
    /// Evaluate excitation and observability Gramians along the trajectory.
    CheckObservability(CommonArgs),
    /// Run one simulation per value of a parameter and summarize.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: k_r, k_p, dt, init-angle, q-scale, v-scale.
        #[arg(long)]
        axis: String,
        /// Comma-separated values to sweep over.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load_config(common: &CommonArgs) -> Result<ScenarioConfig, HarnessError> {
    let mut config = match &common.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate(common) => {
            let config = load_config(&common)?;
            let art = run_scenario(&config)?;
            write_outputs(&art, &common.out)?;
            if let Some(last) = art.terminal() {
                println!(
                    "simulate: wrote {} steps to {}; terminal attitude_distance={:.3e} \
                     position_error={:.3e} xtilde_norm={:.3e}",
                    art.rows.len(),
                    common.out.display(),
                    last.attitude_distance,
                    last.position_error,
                    last.xtilde_norm
                );
            } else {
                println!(
                    "simulate: zero horizon, wrote headers to {}",
                    common.out.display()
                );
            }
            Ok(())
        }
        Command::CheckObservability(common) => {
            let config = load_config(&common)?;
            let reports = check_observability(&config)?;
            write_observability(&reports, &common.out)?;
            let worst = reports.pe.worst_margin();
            if reports.pe.all_pass() {
                println!(
                    "pe: all {} landmarks persistently excited (worst margin {:.3e} > {:.3e})",
                    reports.pe.min_eigs.first().map_or(0, Vec::len),
                    worst,
                    reports.pe.threshold
                );
            } else {
                for (i, pass) in reports.pe.landmark_pass.iter().enumerate() {
                    if !pass {
                        println!("pe: landmark {i} FAILS the excitation check");
                    }
                }
            }
            let min_gram = reports
                .gramian
                .iter()
                .map(|g| g.min_eig)
                .fold(f64::INFINITY, f64::min);
            let max_diff = reports
                .gramian
                .iter()
                .map(|g| g.rel_diff)
                .fold(0.0_f64, f64::max);
            println!(
                "gramian: {} windows, min eigenvalue {:.3e}, max direct/factored \
                 relative difference {:.3e}",
                reports.gramian.len(),
                min_gram,
                max_diff
            );
            Ok(())
        }
        Command::Sweep {
            common,
            axis,
            values,
        } => {
            let config = load_config(&common)?;
            let axis = SweepAxis::from_str(&axis)?;
            let rows = run_sweep(&config, axis, &values)?;
            write_sweep_csv(&rows, &common.out)?;
            for r in &rows {
                println!(
                    "sweep {}: attitude_distance={:.3e} ptilde={:.3e} xtilde={:.3e} rate={:.3e}",
                    r.label,
                    r.terminal_attitude_distance,
                    r.terminal_ptilde_norm,
                    r.terminal_xtilde_norm,
                    r.decay_rate
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": err.to_string(),
                "kind": err.kind(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
