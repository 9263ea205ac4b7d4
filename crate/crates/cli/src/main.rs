use std::path::PathBuf;
use std::process::ExitCode;

use autonet::agents::{LinkFailure, Mode, ScenarioKind};
use autonet::orchestrator::{
    cmd_compare, cmd_discover, cmd_run, parse_failure, OrchestratorError, RunManifest, DEFAULT_EPISODES,
};
use autonet::sim::LogLevel;
use autonet::wireless::EnvMode;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "autonet",
    version,
    about = "RL-driven MAC configuration over a self-organizing network"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot the network, discover the RL nodes and run one scenario.
    Run {
        #[arg(long, default_value = "central-multi")]
        scenario: ScenarioKind,
        #[arg(long, default_value = "train")]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_EPISODES)]
        episodes: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Topology file; the built-in demo network when omitted.
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Policy snapshot for --mode infer.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Link failure "t_ms a b", relative to the scenario start. Repeatable.
        #[arg(long = "fail", value_parser = parse_failure)]
        fail: Vec<LinkFailure>,
        #[arg(long, default_value = "demo")]
        env: EnvMode,
    },
    /// Tabulate learning curves and inference throughput of finished runs.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write compare.txt and compare.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Boot the network and print the name-to-address table.
    Discover {
        #[arg(long)]
        topology: Option<PathBuf>,
    },
}

fn log_level() -> Result<LogLevel, OrchestratorError> {
    match std::env::var("AUTONET_LOG") {
        Ok(v) => v
            .parse()
            .map_err(|e| OrchestratorError::Usage(format!("AUTONET_LOG: {e}"))),
        Err(_) => Ok(LogLevel::Info),
    }
}

fn run(cli: Cli) -> Result<(), OrchestratorError> {
    let level = log_level()?;
    match cli.cmd {
        Command::Run {
            scenario,
            mode,
            episodes,
            seed,
            topology,
            out,
            policy,
            fail,
            env,
        } => {
            let manifest = RunManifest {
                scenario,
                mode,
                episodes,
                seed,
                topology,
                out_dir: out,
                policy,
                failures: fail,
                env,
                log_level: level,
            };
            let summary = cmd_run(&manifest)?;
            print!("{}", summary.to_text());
            println!("artifacts in {}", manifest.out_dir.display());
        }
        Command::Compare { dirs, out } => {
            let cmp = cmd_compare(&dirs, out.as_deref())?;
            for w in &cmp.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", cmp.to_text());
        }
        Command::Discover { topology } => {
            let report = cmd_discover(topology.as_deref(), level)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("autonet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
