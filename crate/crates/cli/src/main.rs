//! `ospatialnet` command-line tool.
//!
//! Errors go to stderr as `error[<kind>]: <message>`. Exit status is 0 on
//! success, 2 for bad input (arguments, files, configs, checkpoints) and 1
//! for failures inside training or the numerics.

mod bench;
mod enhance;
mod eval;
mod io;
mod simulate;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ospatialnet::Error;

#[derive(Parser, Debug)]
#[command(name = "ospatialnet", version, about = "Streaming multichannel speech enhancement")]
struct Cli {
    /// Seed for model initialization, scene sampling and shuffling.
    #[arg(long, global = true, env = "OSPN_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "OSPN_THREADS")]
    threads: Option<usize>,
    /// Pin everything to one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// More log output; repeat for trace. `OSPN_LOG` overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance a WAV file or a folder of WAV files.
    Enhance(enhance::Args),
    /// Train a model with a stage plan.
    Train(train::Args),
    /// Render simulated scenes to WAV plus a manifest.
    Simulate(simulate::Args),
    /// Score enhanced audio against references.
    Eval(eval::Args),
    /// Measure streaming latency and state memory.
    Bench(bench::Args),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training(_) | Error::Shape { .. } => 1,
        _ => 2,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OSPN_LOG", level))
        .format_timestamp_millis()
        .init();
}

fn init_threads(cli: &Cli) -> Result<usize, Error> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build_global()
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;
    Ok(rayon::current_num_threads())
}

fn run(cli: Cli) -> Result<(), Error> {
    let threads = init_threads(&cli)?;
    log::info!(
        "ospatialnet {} seed={} threads={} deterministic={}",
        env!("CARGO_PKG_VERSION"),
        cli.seed.map_or("default".to_string(), |s| s.to_string()),
        threads,
        cli.deterministic
    );
    match cli.command {
        Command::Enhance(a) => enhance::run(a),
        Command::Train(a) => train::run(a, cli.seed),
        Command::Simulate(a) => simulate::run(a, cli.seed.unwrap_or(0)),
        Command::Eval(a) => eval::run(a),
        Command::Bench(a) => bench::run(a, cli.seed.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e);
            ExitCode::from(exit_code(&e))
        }
    }
}
