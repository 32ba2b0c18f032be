use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use pointsup::head::{read_features, HeadSnapshot};
use pointsup::loss::GridPrediction;
use pointsup::mask::BoundingBox;
use pointsup::render::{head_probability, render, RenderConfig, RenderSpace};
use pointsup::Exec;
use serde::Serialize;

#[derive(clap::Args)]
pub struct Args {
    /// Head snapshot (`.json` or binary).
    #[arg(long)]
    params: PathBuf,
    /// Feature map file.
    #[arg(long)]
    features: PathBuf,
    /// Thresholded mask PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 28)]
    start: usize,
    #[arg(long, default_value_t = 224)]
    target: usize,
    #[arg(long, default_value_t = 784)]
    nsel: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Raw probabilities: JSON for `.json`, f64 little-endian row-major otherwise.
    #[arg(long)]
    probs: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbDump<'a> {
    width: usize,
    height: usize,
    values: &'a [f64],
}

pub fn write_mask_png(path: &Path, grid: &GridPrediction, threshold: f64) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), grid.width as u32, grid.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = grid.values.iter().map(|&p| if p >= threshold { 255 } else { 0 }).collect();
    enc.write_header()?.write_image_data(&pixels)?;
    Ok(())
}

fn write_probs(path: &Path, grid: &GridPrediction) -> Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let dump = ProbDump {
            width: grid.width,
            height: grid.height,
            values: &grid.values,
        };
        std::fs::write(path, serde_json::to_vec(&dump)?)?;
    } else {
        let bytes: Vec<u8> = grid.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

pub fn run(a: Args) -> Result<()> {
    let snap = HeadSnapshot::load(&a.params)?;
    let params = snap.head_params()?;
    let (fgrid, feature_box) = read_features(std::io::BufReader::new(File::open(&a.features)?))?;
    if fgrid.channels != params.arch.feature_dim {
        bail!("feature map has {} channels, head expects {}", fgrid.channels, params.arch.feature_dim);
    }
    let bbox = match feature_box.or(snap.header.bbox) {
        Some(b) => b,
        None => BoundingBox::new(0.0, 0.0, fgrid.width as f64, fgrid.height as f64)?,
    };
    let encoder = snap.header.coords.encoder();
    let cfg = RenderConfig {
        start_res: a.start,
        target_res: a.target,
        n_select: a.nsel,
        space: RenderSpace::Probability,
    };
    let out = render(
        |u, v| head_probability(&params, &encoder, &fgrid, &bbox, u, v),
        &cfg,
        Exec::Parallel,
    )?;
    write_mask_png(&a.out, &out.grid, a.threshold)?;
    if let Some(p) = &a.probs {
        write_probs(p, &out.grid)?;
    }
    println!(
        "{}x{} mask, {} point evaluations ({} dense) -> {}",
        a.target,
        a.target,
        out.eval_count,
        a.target * a.target,
        a.out.display()
    );
    Ok(())
}
