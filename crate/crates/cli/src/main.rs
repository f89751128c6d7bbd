mod args;
mod commands;
mod remote;

use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

static VERBOSE: AtomicBool = AtomicBool::new(false);

/// Progress output on stderr, shown with `--verbose`.
macro_rules! progress {
    ($($arg:tt)*) => {
        if $crate::VERBOSE.load(std::sync::atomic::Ordering::Relaxed) {
            eprintln!($($arg)*);
        }
    };
}
pub(crate) use progress;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    VERBOSE.store(cli.verbose, Ordering::Relaxed);
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn run(command: Command) -> anyhow::Result<serde_json::Value> {
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Graph(a) => commands::graph(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Rank(a) => commands::rank(a),
        Command::Select(a) => commands::select(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Experiment(a) => commands::experiment(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Serve(a) => remote::serve(a),
        Command::Queue(a) => remote::queue(a),
        Command::Label(a) => remote::label(a),
        Command::Status(a) => remote::status(a),
        Command::Propagate(a) => remote::propagate(a),
    }
}
