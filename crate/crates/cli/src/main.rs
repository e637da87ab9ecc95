use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spiraltwin_cli::{
    cmd_eval, cmd_filter, cmd_identify, cmd_ik, cmd_reachmap, cmd_serve, cmd_simulate, CliError, RunArgs,
};

/// Digital twin of a cable-driven spiral soft arm.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
#[derive(Parser)]
#[command(name = "spiraltwin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; a manifest.json is written there
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for every random choice of the run
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

impl From<Common> for RunArgs {
    fn from(c: Common) -> Self {
        RunArgs { config: c.config, out: c.out, seed: c.seed }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment protocol and write one CSV per condition
    Simulate(Common),
    /// Identify parameters from a dataset bundle or a synthetic twin
    Identify {
        #[command(flatten)]
        common: Common,
        /// Run a single stage: stiffness, damping or control
        #[arg(long, value_name = "NAME")]
        stage: Option<String>,
    },
    /// Generate the IK dataset, train the network and score it
    Ik(Common),
    /// Build soft-arm and rigid-arm reachability maps
    Reachmap(Common),
    /// Print internal error and dynamic loss of two trajectories as JSON
    Eval {
        simulated: PathBuf,
        reference: PathBuf,
        /// Loss config file
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Low-pass filter a trajectory CSV
    Filter {
        input: PathBuf,
        output: PathBuf,
        /// Filter config file
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
    },
    /// Serve the teleoperation session over WebSocket
    Serve {
        #[command(flatten)]
        common: Common,
        /// Port to listen on; 0 picks a free port
        #[arg(long, value_name = "N")]
        port: Option<u16>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("output serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => print_json(&cmd_simulate(&c.into())?),
        Command::Identify { common, stage } => print_json(&cmd_identify(&common.into(), stage.as_deref())?.1),
        Command::Ik(c) => print_json(&cmd_ik(&c.into())?.1),
        Command::Reachmap(c) => print_json(&cmd_reachmap(&c.into())?.1),
        Command::Eval { simulated, reference, config } => {
            print_json(&cmd_eval(&simulated, &reference, config.as_deref())?)
        }
        Command::Filter { input, output, config } => cmd_filter(&input, &output, config.as_deref())?,
        Command::Serve { common, port } => cmd_serve(&common.into(), port)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
