use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::ValueEnum;
use pointsup::head::{write_features, CoordMode, HeadSnapshot, ParamHeadMode, PointHeadParams};
use pointsup::sim::{NoiseConfig, NoiseMode};
use pointsup::toy::{
    descriptor, experiment_points, generate_suite, run_ablations, run_experiments, run_point_sweep,
    train_instance, train_pooled, Experiment, ExperimentResult, SyntheticInstance, Supervision, TrainConfig,
    ABLATION_NOISE_RATE, SWEEP_FULL_GRID, SWEEP_POINTS,
};
use pointsup::Exec;

use crate::NoiseArg;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Free,
    Pooled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CoordsArg {
    None,
    Rel,
    Pe,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 0)]
    suite_seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Point-location seeds 0..N.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Point-count sweep plus the full-grid reference.
    #[arg(long, conflicts_with = "ablations")]
    sweep: bool,
    /// Coordinate x augmentation x label-noise grid.
    #[arg(long)]
    ablations: bool,
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Supervise on a G x G grid instead of sampled points.
    #[arg(long)]
    full_grid: Option<usize>,
    #[arg(long, value_enum, default_value = "pooled")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "pe")]
    coords: CoordsArg,
    #[arg(long)]
    augment: bool,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long, default_value_t = ABLATION_NOISE_RATE)]
    rate: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
    /// Full per-instance results, loss curves and one trained head.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

fn base_config(a: &Args) -> TrainConfig {
    let mut cfg = match a.mode {
        ModeArg::Free => TrainConfig::default(),
        ModeArg::Pooled => TrainConfig::pooled_linear(),
    };
    cfg.coords = match a.coords {
        CoordsArg::None => CoordMode::None,
        CoordsArg::Rel => CoordMode::Relative,
        CoordsArg::Pe => cfg.coords,
    };
    cfg.augment = a.augment;
    cfg.supervision = match a.full_grid {
        Some(g) => Supervision::FullGrid(g),
        None => Supervision::Points(a.points),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg
}

pub fn write_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r.summary())?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the first instance's head under `exp` and writes it with its features.
fn dump_example(dir: &Path, suite: &[SyntheticInstance], exp: &Experiment, seed: u64, exec: Exec) -> Result<()> {
    let inst = &suite[0];
    let points = experiment_points(suite, exp, seed)?;
    let (params, losses): (PointHeadParams, Vec<f64>) = match exp.cfg.mode {
        ParamHeadMode::Free => {
            let out = train_instance(inst, &points[0], &exp.cfg, seed)?;
            (out.params, out.losses)
        }
        ParamHeadMode::PooledLinear => {
            let out = train_pooled(suite, &points, &exp.cfg, seed, exec)?;
            (out.head.generate(&descriptor(inst))?, out.losses)
        }
    };
    HeadSnapshot::new(&params, exp.cfg.coords, Some(inst.bbox)).save(dir.join("instance0_head.bin"))?;
    write_features(
        &inst.fgrid,
        Some(&inst.bbox),
        std::io::BufWriter::new(std::fs::File::create(dir.join("instance0.feat"))?),
    )?;
    let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(a: Args) -> Result<()> {
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let base = base_config(&a);
    let seeds: Vec<u64> = (0..a.seeds.max(1)).collect();
    let suite = generate_suite(a.instances, a.suite_seed)?;
    let started = Instant::now();
    let (results, example) = if a.sweep {
        let r = run_point_sweep(&suite, &base, &SWEEP_POINTS, a.full_grid.unwrap_or(SWEEP_FULL_GRID), &seeds, exec)?;
        (r, Experiment::clean(base))
    } else if a.ablations {
        (run_ablations(&suite, &base, &seeds, exec)?, Experiment::clean(base))
    } else {
        let exp = Experiment {
            cfg: base,
            noise: a.noise.map(|n| NoiseConfig {
                mode: match n {
                    NoiseArg::Random => NoiseMode::Random,
                    NoiseArg::Boundary => NoiseMode::Boundary,
                },
                rate: a.rate,
            }),
        };
        (run_experiments(&suite, &[exp], &seeds, exec)?, exp)
    };
    write_csv(&a.out, &results).with_context(|| format!("writing {}", a.out.display()))?;
    for r in &results {
        let s = r.summary();
        eprintln!(
            "{:>7} {:>4} aug={:<5} {:>8}  mean IoU {:.4} (std {:.4}, seed std {:.4})",
            s.supervision, s.coords, s.augment, s.noise, s.mean_iou, s.std_iou, s.seed_std
        );
    }
    eprintln!("{} experiments in {:.1} s", results.len(), started.elapsed().as_secs_f64());
    if let Some(dir) = &a.dump_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.json"), serde_json::to_vec_pretty(&results)?)?;
        dump_example(dir, &suite, &example, seeds[0], exec)?;
    }
    Ok(())
}
