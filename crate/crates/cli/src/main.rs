//! `sdmc`: train and sample few-step diffusion models on 2D point sets.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
//! format error, 4 numeric failure.

mod commands;
mod config;
mod plot;

use clap::{Parser, Subcommand};
use sdmc_core::Error;

#[derive(Parser)]
#[command(
    name = "sdmc",
    version,
    about = "Denoising diffusion on 2D point sets with few-step chain-trained sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the swirl benchmark dataset
    GenData(commands::GenDataArgs),
    /// Train a denoiser (baseline or shortcut regime)
    Train(commands::TrainArgs),
    /// Generate points from a trained checkpoint
    Sample(commands::SampleArgs),
    /// Score generated points against a reference set
    Eval(commands::EvalArgs),
    /// Render point-set CSVs as an SVG scatter grid
    Plot(commands::PlotArgs),
}

fn run(cli: Cli) -> sdmc_core::Result<()> {
    match cli.command {
        Cmd::GenData(args) => commands::gen_data(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Sample(args) => commands::sample(args),
        Cmd::Eval(args) => commands::eval(args),
        Cmd::Plot(args) => commands::plot(args),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::State(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
