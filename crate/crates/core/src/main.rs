use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smcforge::pipeline::{run, Command, Context};

#[derive(Parser, Debug)]
#[command(name = "smcforge", version, about = "Soil-moisture forecasting from radar and optical imagery")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the world and training seeds of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces `paths.workdir` of the config.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic world.
    Simulate(Common),
    /// Train the configured forecasters.
    Train(Common),
    /// Forecast maps and site series from trained checkpoints.
    Predict(Common),
    /// Score trained models on held-out sites and time.
    Evaluate(Common),
    /// Run the training-data ablation.
    Compare(Common),
    /// Render an NDVI crop-stress map.
    NdviMap(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (cmd, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Predict(c) => (Command::Predict, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::Compare(c) => (Command::Compare, c),
        Cmd::NdviMap(c) => (Command::NdviMap, c),
    };
    let result = Context::load(&common.config, common.seed, common.workdir).and_then(|ctx| run(&ctx, cmd));
    match result {
        Ok(m) => {
            log::info!("{}: {} outputs written", m.command, m.outputs.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
