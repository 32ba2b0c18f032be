use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

mod budget_cmd;
mod render_cmd;
mod serve_cmd;
mod simulate_cmd;
mod toy_cmd;

#[derive(Parser)]
#[command(name = "pointsup", version, about = "Point-supervised instance segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NoiseArg {
    Random,
    Boundary,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate point labels from a mask dataset.
    Simulate(simulate_cmd::Args),
    /// Render a mask from a point head and a feature map.
    Render(render_cmd::Args),
    /// Train point heads on the synthetic suite.
    TrainToy(toy_cmd::Args),
    /// Annotation-time budget report.
    Budget(budget_cmd::Args),
    /// Run the annotation service.
    Serve(serve_cmd::Args),
}

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate_cmd::run(a),
        Command::Render(a) => render_cmd::run(a),
        Command::TrainToy(a) => toy_cmd::run(a),
        Command::Budget(a) => budget_cmd::run(a),
        Command::Serve(a) => serve_cmd::run(a),
    }
}
