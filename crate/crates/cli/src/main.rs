use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use rangefuse::map::write_map;
use rangefuse::par::Execution;
use rangefuse::pipeline::Ablation;
use rangefuse::run::{gamma_sweep, metrics_json, run_scenario, sweep_csv, write_artifacts, RunConfig};
use rangefuse::sim::Scenario;
use rangefuse::{Error, Result};

#[derive(Parser)]
#[command(name = "rangefuse", version, about = "UWB range-only SLAM fused with LiDAR scan matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write map, trajectory, beacon and metric files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a scenario once per range weight and print a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated range weights.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        gammas: Vec<f64>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and write only the final map.
    ExportMap {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// File stem of the image and its header.
        #[arg(long, default_value = "map")]
        stem: String,
    },
    /// Print a builtin scenario as JSON, or list them.
    Scenario { name: Option<String> },
}

#[derive(Args)]
struct Common {
    /// Builtin scenario name or path to a scenario JSON file.
    scenario: String,
    /// Range weight in the fused matcher objective [default: 0.65].
    #[arg(long)]
    gamma: Option<f64>,
    /// full, no_match, no_correction or lidar_only_match.
    #[arg(long, default_value = "full")]
    ablation: Ablation,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Steps excluded from the metrics at the start of the run.
    #[arg(long, default_value_t = rangefuse::metrics::DEFAULT_SKIP_STEPS)]
    skip: usize,
    /// Disable the data-parallel inner loops.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::new(self.scenario.clone()).with_ablation(self.ablation);
        cfg.gamma = self.gamma;
        cfg.seed_override = self.seed;
        cfg.skip_steps = self.skip;
        if self.sequential {
            cfg.execution = Execution::Sequential;
        }
        cfg
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Run { common, out } => {
            let cfg = common.config();
            let res = run_scenario(&cfg)?;
            write_artifacts(&res, &out)?;
            info!("wrote artifacts to {}", out.display());
            print!("{}", metrics_json(&res.metrics)?);
            Ok(0)
        }
        Command::Sweep { common, gammas, out } => {
            let cfg = common.config();
            // surface a bad scenario as a config error rather than one per row
            cfg.session_config(&cfg.scenario()?)?;
            let rows = gamma_sweep(&cfg, &gammas, cfg.execution)?;
            let csv = sweep_csv(&rows);
            match out {
                Some(path) => std::fs::write(&path, csv)?,
                None => print!("{csv}"),
            }
            for r in rows.iter().filter(|r| !r.is_ok()) {
                error!("gamma {}: {}", r.gamma, r.error.as_deref().unwrap_or(""));
            }
            Ok(rows.iter().filter_map(|r| r.exit_code).max().unwrap_or(0) as u8)
        }
        Command::ExportMap { common, out, stem } => {
            let res = run_scenario(&common.config())?;
            let grid = res
                .map
                .ok_or_else(|| Error::Scenario("the run never started mapping".into()))?;
            std::fs::create_dir_all(&out)?;
            write_map(&grid, &out, &stem)?;
            info!("wrote {}", out.join(format!("{stem}.pgm")).display());
            Ok(0)
        }
        Command::Scenario { name } => {
            match name {
                Some(n) => println!("{}", Scenario::builtin(&n)?.to_json()),
                None => {
                    for n in Scenario::builtin_names() {
                        println!("{n}");
                    }
                }
            }
            Ok(0)
        }
    }
}
