use std::path::PathBuf;

use anyhow::{Context, Result};
use pointsup::dataset::Dataset;
use pointsup::sim::{simulate_dataset, NoiseConfig, NoiseMode};
use pointsup::Exec;

use crate::NoiseArg;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: Args) -> Result<()> {
    let ds = Dataset::load(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let noise = a.noise.map(|n| NoiseConfig {
        mode: match n {
            NoiseArg::Random => NoiseMode::Random,
            NoiseArg::Boundary => NoiseMode::Boundary,
        },
        rate: a.rate,
    });
    let sim = simulate_dataset(&ds, a.points, a.seed, noise, Exec::Parallel)?;
    sim.file.save(&a.out)?;
    for id in &sim.skipped {
        eprintln!("skipped instance {id}: empty mask");
    }
    let total: usize = sim.annotations.iter().map(|x| x.points.len()).sum();
    eprintln!(
        "{} instances, {total} points, {} flipped -> {}",
        sim.annotations.len(),
        sim.flipped.len(),
        a.out.display()
    );
    Ok(())
}
