//! Synthetic instances and small training experiments for point heads.
//!
//! Each instance is a random ellipse or star polygon on a 64x64 canvas with
//! an 8-channel feature map standing in for backbone features. Heads are
//! fit per instance (free mode) or jointly through a pooled-linear parameter
//! head, then scored by mask IoU of the subdivision render at 224x224.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BboxSource, Dataset, ImageInfo, InstanceRecord};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::head::{
    backward_input, fill_head_input, forward_input, l2_param_loss, region_descriptor, Activations,
    CoordMode, FeatureGrid, HeadArch, ParamHeadMode, PointHeadParams, PooledLinearHead, PositionEncoder,
    DEFAULT_L2_WEIGHT,
};
use crate::loss::{augment_indices, filter_points_to_box, grid_cell_points, grid_labels_from_mask, point_bce};
use crate::mask::{bbox_from_mask, boundary_distance, mask_iou, rasterize_polygon, Bitmask, BoundingBox};
use crate::render::{head_probability, render, render_dense, RenderConfig};
use crate::sim::{inject_label_noise, keyed_rng, simulate_instance, LabeledPoint, NoiseConfig, NoiseMode, PointAnnotation, PointLabel, PointSource};

pub const CANVAS: usize = 64;
pub const CHANNELS: usize = 8;
pub const MIN_AREA_FRACTION: f64 = 0.10;
pub const MAX_AREA_FRACTION: f64 = 0.80;

const SUITE_TAG: u64 = 0x7375_6974; // "suit"
const TRAIN_TAG: u64 = 0x7472_6e20; // "trn "

/// Pixel noise on the signed-distance channel.
pub const FEATURE_NOISE: f64 = 0.9;
/// Length scale (px) of the tanh-squashed signed distance.
const DISTANCE_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Star,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticInstance {
    pub id: u64,
    pub shape: ShapeKind,
    pub mask: Bitmask,
    /// Tight box of `mask`.
    pub bbox: BoundingBox,
    pub fgrid: FeatureGrid,
}

impl SyntheticInstance {
    pub fn area_fraction(&self) -> f64 {
        self.mask.count() as f64 / self.bbox.area()
    }

    pub fn record(&self) -> InstanceRecord {
        InstanceRecord {
            instance_id: self.id,
            image_id: self.id,
            category: format!("{:?}", self.shape).to_lowercase(),
            bbox: self.bbox,
            bbox_source: BboxSource::DerivedFromMask,
            mask: self.mask.clone(),
        }
    }
}

fn shape_polygon<R: Rng>(rng: &mut R) -> (ShapeKind, Vec<[f64; 2]>) {
    let cx = rng.random_range(22.0..42.0);
    let cy = rng.random_range(22.0..42.0);
    let r = rng.random_range(8.0..20.0);
    if rng.random_bool(0.5) {
        let a = r * rng.random_range(0.6..1.0);
        let b = r * rng.random_range(0.4..1.0);
        let theta: f64 = rng.random_range(0.0..PI);
        let (s, c) = theta.sin_cos();
        let ring = (0..48)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / 48.0;
                let (ex, ey) = (a * t.cos(), b * t.sin());
                [cx + c * ex - s * ey, cy + s * ex + c * ey]
            })
            .collect();
        (ShapeKind::Ellipse, ring)
    } else {
        let k = rng.random_range(6..=12);
        let ring = (0..k)
            .map(|i| {
                let t = 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / k as f64;
                let rad = r * rng.random_range(0.45..1.0);
                [cx + rad * t.cos(), cy + rad * t.sin()]
            })
            .collect();
        (ShapeKind::Star, ring)
    }
}

/// Sum of four random plane waves with wavelengths of 16 to 64 px, unit variance.
fn smooth_field<R: Rng>(rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let k = 2.0 * PI / rng.random_range(16.0..64.0);
            let dir: f64 = rng.random_range(0.0..2.0 * PI);
            (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let amp = (2.0 / waves.len() as f64).sqrt();
    (0..CANVAS * CANVAS)
        .map(|i| {
            let (x, y) = ((i % CANVAS) as f64 + 0.5, (i / CANVAS) as f64 + 0.5);
            waves.iter().map(|(kx, ky, ph)| amp * (kx * x + ky * y + ph).cos()).sum()
        })
        .collect()
}

/// One suite member; deterministic per `(seed, index)`.
pub fn generate_instance(seed: u64, index: u64) -> Result<SyntheticInstance> {
    let mut rng = keyed_rng(seed, SUITE_TAG, index);
    let (shape, mask, bbox) = loop {
        let (shape, ring) = shape_polygon(&mut rng);
        let raster = rasterize_polygon(&[ring], CANVAS, CANVAS)?;
        if raster.degenerate || raster.mask.is_empty() {
            continue;
        }
        let bbox = bbox_from_mask(&raster.mask)?;
        let frac = raster.mask.count() as f64 / bbox.area();
        if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            break (shape, raster.mask, bbox);
        }
    };

    let dist = boundary_distance(&mask);
    let n = CANVAS * CANVAS;
    let signed: Vec<f64> = (0..n)
        .map(|i| {
            let d = dist.values[i];
            if mask.bits()[i] {
                d
            } else {
                -d
            }
        })
        .collect();
    let mut data = Vec::with_capacity(CHANNELS * n);
    data.extend(signed.iter().map(|&s| {
        let z: f64 = StandardNormal.sample(&mut rng);
        (s / DISTANCE_SCALE).tanh() + FEATURE_NOISE * z
    }));
    for _ in 0..3 {
        let rho = rng.random_range(0.3..0.6);
        let field = smooth_field(&mut rng);
        data.extend(signed.iter().zip(&field).map(|(&s, &f)| rho * (s / 8.0).tanh() + (1.0 - rho) * f));
    }
    for _ in 0..4 {
        data.extend((0..n).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    Ok(SyntheticInstance {
        id: index,
        shape,
        mask,
        bbox,
        fgrid: FeatureGrid::new(CHANNELS, CANVAS, CANVAS, data)?,
    })
}

pub fn generate_suite(n_instances: usize, seed: u64) -> Result<Vec<SyntheticInstance>> {
    if n_instances == 0 {
        return Err(invalid("suite needs at least one instance"));
    }
    (0..n_instances as u64).map(|i| generate_instance(seed, i)).collect()
}

/// The suite as a dataset with one image per instance.
pub fn suite_dataset(suite: &[SyntheticInstance], id: &str) -> Dataset {
    Dataset {
        id: id.to_string(),
        images: suite
            .iter()
            .map(|s| ImageInfo {
                id: s.id,
                file_name: format!("toy_{:05}.png", s.id),
                width: CANVAS,
                height: CANVAS,
            })
            .collect(),
        instances: suite.iter().map(SyntheticInstance::record).collect(),
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "kebab-case")]
pub enum Supervision {
    /// `N` uniformly sampled points in the box.
    Points(usize),
    /// Labels at every cell center of a `G x G` grid over the box.
    FullGrid(usize),
}

impl Supervision {
    pub fn label(&self) -> String {
        match self {
            Supervision::Points(n) => format!("P{n}"),
            Supervision::FullGrid(g) => format!("full{g}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub supervision: Supervision,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub augment: bool,
    pub mode: ParamHeadMode,
    pub coords: CoordMode,
    pub hidden: [usize; 3],
    pub l2_weight: f64,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            supervision: Supervision::Points(10),
            steps: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            augment: false,
            mode: ParamHeadMode::Free,
            coords: CoordMode::Fourier {
                frequencies: 16,
                scale: 1.0,
                seed: 0,
            },
            hidden: [16, 16, 16],
            l2_weight: DEFAULT_L2_WEIGHT,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn pooled_linear() -> Self {
        Self {
            mode: ParamHeadMode::PooledLinear,
            ..Self::default()
        }
    }

    pub fn arch(&self) -> HeadArch {
        HeadArch {
            feature_dim: CHANNELS,
            pe_dim: self.coords.dim(),
            hidden: self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.l2_weight < 0.0 {
            return Err(invalid("l2 weight must be >= 0"));
        }
        if let Supervision::FullGrid(0) = self.supervision {
            return Err(invalid("full-grid size must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be >= 1"));
        }
        self.render.steps()?;
        Ok(())
    }
}

/// Labeled points for one instance. Point locations depend on `seed`; the
/// full grid does not.
pub fn supervision_points(instance: &SyntheticInstance, supervision: Supervision, seed: u64) -> Result<Vec<LabeledPoint>> {
    match supervision {
        Supervision::Points(n) => Ok(simulate_instance(&instance.record(), n, seed)?.points),
        Supervision::FullGrid(g) => {
            let coords = grid_cell_points(&instance.bbox, g, g);
            let labels = grid_labels_from_mask(&instance.mask, &instance.bbox, g, g);
            Ok(coords
                .into_iter()
                .zip(labels)
                .map(|((x, y), l)| LabeledPoint {
                    x,
                    y,
                    label: PointLabel::from_foreground(l > 0.5),
                    source: PointSource::Simulated,
                })
                .collect())
        }
    }
}

/// Head inputs `[feature; encoding]` for each point, row-major.
#[derive(Clone, Debug, PartialEq)]
struct Prepared {
    input_dim: usize,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    weights: Vec<f64>,
}

impl Prepared {
    fn new(instance: &SyntheticInstance, points: &[LabeledPoint], encoder: &PositionEncoder) -> Self {
        let batch = filter_points_to_box(points, &instance.bbox);
        let fdim = instance.fgrid.channels;
        let input_dim = fdim + encoder.dim();
        let mut inputs = vec![0.0; points.len() * input_dim];
        for (p, row) in points.iter().zip(inputs.chunks_exact_mut(input_dim)) {
            fill_input(instance, encoder, p.x, p.y, row);
        }
        Self {
            input_dim,
            inputs,
            labels: batch.labels,
            weights: batch.weights,
        }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn supervised(&self) -> bool {
        self.weights.iter().any(|&w| w > 0.0)
    }
}

fn fill_input(instance: &SyntheticInstance, encoder: &PositionEncoder, x: f64, y: f64, row: &mut [f64]) {
    fill_head_input(&instance.fgrid, &instance.bbox, encoder, x, y, row);
}

/// Objective value and gradient for one instance at `params`: point BCE over
/// the chosen subset plus the l2 penalty.
fn objective(
    params: &PointHeadParams,
    data: &Prepared,
    subset: Option<&[usize]>,
    l2_weight: f64,
    acts: &mut Vec<Activations>,
) -> Result<(f64, Vec<f64>)> {
    let idx: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..data.len()).collect(),
    };
    if acts.len() < idx.len() {
        acts.resize_with(idx.len(), || Activations::new(&params.arch));
    }
    let mut logits = Vec::with_capacity(idx.len());
    for (slot, &i) in idx.iter().enumerate() {
        logits.push(forward_input(params, data.row(i), &mut acts[slot]));
    }
    let labels: Vec<f64> = idx.iter().map(|&i| data.labels[i]).collect();
    let weights: Vec<f64> = idx.iter().map(|&i| data.weights[i]).collect();
    let bce = point_bce(&logits, &labels, &weights)?;
    let (l2, mut grad) = l2_param_loss(&params.flat, l2_weight);
    for (slot, &g) in bce.grad.iter().enumerate() {
        if g != 0.0 {
            backward_input(params, &mut acts[slot], g, &mut grad, None);
        }
    }
    Ok((bce.loss + l2, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: PointHeadParams,
    /// Objective before each update.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Steps at which the window-`w` moving average of `losses` goes up.
pub fn smoothed_increases(losses: &[f64], window: usize) -> Vec<usize> {
    if window == 0 || losses.len() <= window {
        return Vec::new();
    }
    let avg: Vec<f64> = losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    avg.windows(2)
        .enumerate()
        .filter(|(_, p)| p[1] > p[0] + 1e-12)
        .map(|(i, _)| i + window)
        .collect()
}

fn momentum_step(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
}

fn check_finite(step: usize, loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

/// Fits a free-mode head to `points` by momentum gradient descent.
///
/// The initialization and augmentation draws depend on `seed` only. With no
/// supervised point the initial parameters are returned untouched.
pub fn train_instance(instance: &SyntheticInstance, points: &[LabeledPoint], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.arch();
    let encoder = cfg.coords.encoder();
    let data = Prepared::new(instance, points, &encoder);
    let mut params = PointHeadParams::init_free(arch, seed);
    if !data.supervised() {
        return Ok(TrainOutcome { params, losses: Vec::new() });
    }
    let aug_seed = keyed_rng_seed(seed, instance.id);
    let mut velocity = vec![0.0; params.flat.len()];
    let mut acts = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let subset = cfg.augment.then(|| augment_indices(data.len(), aug_seed, step as u64));
        let (loss, grad) = objective(&params, &data, subset.as_deref(), cfg.l2_weight, &mut acts)?;
        check_finite(step, loss, &grad)?;
        losses.push(loss);
        momentum_step(&mut params.flat, &mut velocity, &grad, cfg.learning_rate, cfg.momentum);
    }
    Ok(TrainOutcome { params, losses })
}

fn keyed_rng_seed(seed: u64, instance_id: u64) -> u64 {
    keyed_rng(seed, TRAIN_TAG, instance_id).random()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledOutcome {
    pub head: PooledLinearHead,
    /// Mean objective over instances before each update.
    pub losses: Vec<f64>,
}

pub const DESCRIPTOR_BINS: usize = 2;

pub fn descriptor(instance: &SyntheticInstance) -> Vec<f64> {
    region_descriptor(&instance.fgrid, &instance.bbox, DESCRIPTOR_BINS)
}

/// Fits one shared pooled-linear parameter head over all `instances`.
/// Per-instance gradients run through `exec`; the reduction is in instance
/// order.
pub fn train_pooled(
    instances: &[SyntheticInstance],
    points: &[Vec<LabeledPoint>],
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<PooledOutcome> {
    cfg.validate()?;
    if instances.len() != points.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} point lists", instances.len()),
            actual: format!("{}", points.len()),
        });
    }
    let encoder = cfg.coords.encoder();
    let descs: Vec<Vec<f64>> = instances.iter().map(descriptor).collect();
    let ddim = descs.first().map_or(CHANNELS * DESCRIPTOR_BINS * DESCRIPTOR_BINS + 1, Vec::len);
    let mut head = PooledLinearHead::new(cfg.arch(), ddim, seed);
    let data: Vec<Prepared> = instances.iter().zip(points).map(|(i, p)| Prepared::new(i, p, &encoder)).collect();
    let used: Vec<usize> = (0..instances.len()).filter(|&i| data[i].supervised()).collect();
    if used.is_empty() {
        return Ok(PooledOutcome { head, losses: Vec::new() });
    }
    let aug_seeds: Vec<u64> = instances.iter().map(|i| keyed_rng_seed(seed, i.id)).collect();
    let scale = 1.0 / used.len() as f64;
    let mut va = vec![0.0; head.a.len()];
    let mut vc = vec![0.0; head.c.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let per = exec.map(&used, |&i| -> Result<(f64, Vec<f64>)> {
            let params = head.generate(&descs[i])?;
            let subset = cfg.augment.then(|| augment_indices(data[i].len(), aug_seeds[i], step as u64));
            objective(&params, &data[i], subset.as_deref(), cfg.l2_weight, &mut Vec::new())
        });
        let mut da = vec![0.0; head.a.len()];
        let mut dc = vec![0.0; head.c.len()];
        let mut loss = 0.0;
        for (&i, r) in used.iter().zip(per) {
            let (l, mut g) = r?;
            loss += scale * l;
            g.iter_mut().for_each(|v| *v *= scale);
            head.backward(&descs[i], &g, &mut da, &mut dc);
        }
        check_finite(step, loss, &da)?;
        check_finite(step, loss, &dc)?;
        losses.push(loss);
        momentum_step(&mut head.a, &mut va, &da, cfg.learning_rate, cfg.momentum);
        momentum_step(&mut head.c, &mut vc, &dc, cfg.learning_rate, cfg.momentum);
    }
    Ok(PooledOutcome { head, losses })
}

// ---------------------------------------------------------------------------
// Evaluation

/// Mask probability at a normalized box position.
pub fn predict(instance: &SyntheticInstance, params: &PointHeadParams, encoder: &PositionEncoder, u: f64, v: f64) -> f64 {
    head_probability(params, encoder, &instance.fgrid, &instance.bbox, u, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Rendered mask vs ground-truth labels at the render resolution.
    pub iou: f64,
    pub eval_count: usize,
}

/// Ground-truth labels on the `res x res` lattice over the instance box.
pub fn target_mask(instance: &SyntheticInstance, res: usize) -> Bitmask {
    let labels = grid_labels_from_mask(&instance.mask, &instance.bbox, res, res);
    Bitmask::from_fn(res, res, |c, r| labels[r * res + c] > 0.5)
}

pub fn evaluate(instance: &SyntheticInstance, params: &PointHeadParams, cfg: &TrainConfig) -> Result<Evaluation> {
    let encoder = cfg.coords.encoder();
    let rendered = render(|u, v| predict(instance, params, &encoder, u, v), &cfg.render, Exec::Sequential)?;
    let target = target_mask(instance, cfg.render.target_res);
    Ok(Evaluation {
        iou: mask_iou(&rendered.grid.threshold(0.5), &target)?,
        eval_count: rendered.eval_count,
    })
}

/// IoU between the subdivision render and dense evaluation, both thresholded at 0.5.
pub fn render_vs_dense_iou(instance: &SyntheticInstance, params: &PointHeadParams, cfg: &TrainConfig) -> Result<f64> {
    let encoder = cfg.coords.encoder();
    let f = |u, v| predict(instance, params, &encoder, u, v);
    let rendered = render(f, &cfg.render, Exec::Sequential)?;
    let dense = render_dense(f, cfg.render.target_res, Exec::Sequential);
    mask_iou(&rendered.grid.threshold(0.5), &dense.threshold(0.5))
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub cfg: TrainConfig,
    pub noise: Option<NoiseConfig>,
}

impl Experiment {
    pub fn clean(cfg: TrainConfig) -> Self {
        Self { cfg, noise: None }
    }

    pub fn noise_label(&self) -> &'static str {
        match self.noise.map(|n| n.mode) {
            None | Some(NoiseMode::None) => "clean",
            Some(NoiseMode::Random) => "random",
            Some(NoiseMode::Boundary) => "boundary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    /// `iou[s][i]`: seed `s`, instance `i`.
    pub iou: Vec<Vec<f64>>,
    /// Mean over instances and seeds.
    pub mean_iou: f64,
    /// Standard deviation over instances and seeds.
    pub std_iou: f64,
    /// Mean IoU for each seed.
    pub seed_means: Vec<f64>,
    /// Standard deviation of `seed_means`.
    pub seed_std: f64,
}

/// Flat per-experiment summary for tabular output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub supervision: String,
    pub coords: String,
    pub augment: bool,
    pub noise: String,
    pub noise_rate: f64,
    pub mode: String,
    pub steps: usize,
    pub learning_rate: f64,
    pub n_instances: usize,
    pub n_seeds: usize,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub seed_std: f64,
}

impl ExperimentResult {
    pub fn summary(&self) -> SummaryRow {
        let cfg = &self.experiment.cfg;
        SummaryRow {
            supervision: cfg.supervision.label(),
            coords: cfg.coords.label().to_string(),
            augment: cfg.augment,
            noise: self.experiment.noise_label().to_string(),
            noise_rate: self.experiment.noise.map_or(0.0, |n| n.rate),
            mode: match cfg.mode {
                ParamHeadMode::Free => "free".into(),
                ParamHeadMode::PooledLinear => "pooled-linear".into(),
            },
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
            n_instances: self.iou.first().map_or(0, Vec::len),
            n_seeds: self.seeds.len(),
            mean_iou: self.mean_iou,
            std_iou: self.std_iou,
            seed_std: self.seed_std,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Supervision for every instance under one experiment and seed, noise
/// injected suite-wide.
pub fn experiment_points(suite: &[SyntheticInstance], exp: &Experiment, seed: u64) -> Result<Vec<Vec<LabeledPoint>>> {
    let points = suite
        .iter()
        .map(|inst| supervision_points(inst, exp.cfg.supervision, seed))
        .collect::<Result<Vec<_>>>()?;
    let Some(noise) = exp.noise.filter(|n| n.mode != NoiseMode::None) else {
        return Ok(points);
    };
    let anns: Vec<PointAnnotation> = suite
        .iter()
        .zip(points)
        .map(|(inst, pts)| PointAnnotation {
            instance_id: inst.id,
            meta: crate::sim::AnnotationMeta {
                n_points: pts.len(),
                seed,
                noise_mode: NoiseMode::None,
                noise_rate: 0.0,
            },
            points: pts,
        })
        .collect();
    let records: Vec<InstanceRecord> = suite.iter().map(SyntheticInstance::record).collect();
    let noisy = inject_label_noise(&anns, &records, noise.rate, noise.mode, seed)?;
    Ok(noisy.annotations.into_iter().map(|a| a.points).collect())
}

/// Trains and evaluates every experiment for every seed. Free-mode jobs are
/// spread over `(experiment, seed, instance)`; pooled-linear jobs train once
/// per `(experiment, seed)`.
pub fn run_experiments(suite: &[SyntheticInstance], experiments: &[Experiment], seeds: &[u64], exec: Exec) -> Result<Vec<ExperimentResult>> {
    if seeds.is_empty() {
        return Err(invalid("at least one seed required"));
    }
    for e in experiments {
        e.cfg.validate()?;
    }
    let mut points = Vec::with_capacity(experiments.len() * seeds.len());
    for e in experiments {
        for &s in seeds {
            points.push(experiment_points(suite, e, s)?);
        }
    }
    let ni = suite.len();
    let cell = |e: usize, s: usize| e * seeds.len() + s;

    let mut iou = vec![vec![0.0; ni]; experiments.len() * seeds.len()];
    let free_jobs: Vec<(usize, usize, usize)> = (0..experiments.len())
        .filter(|&e| experiments[e].cfg.mode == ParamHeadMode::Free)
        .flat_map(|e| (0..seeds.len()).flat_map(move |s| (0..ni).map(move |i| (e, s, i))))
        .collect();
    let free = exec.map(&free_jobs, |&(e, s, i)| -> Result<f64> {
        let cfg = &experiments[e].cfg;
        let out = train_instance(&suite[i], &points[cell(e, s)][i], cfg, seeds[s])?;
        Ok(evaluate(&suite[i], &out.params, cfg)?.iou)
    });
    for (&(e, s, i), r) in free_jobs.iter().zip(free) {
        iou[cell(e, s)][i] = r?;
    }
    for (e, exp) in experiments.iter().enumerate() {
        if exp.cfg.mode != ParamHeadMode::PooledLinear {
            continue;
        }
        for (s, &seed) in seeds.iter().enumerate() {
            let out = train_pooled(suite, &points[cell(e, s)], &exp.cfg, seed, exec)?;
            let scores = exec.map_range(ni, |i| -> Result<f64> {
                let params = out.head.generate(&descriptor(&suite[i]))?;
                Ok(evaluate(&suite[i], &params, &exp.cfg)?.iou)
            });
            for (i, r) in scores.into_iter().enumerate() {
                iou[cell(e, s)][i] = r?;
            }
        }
    }

    Ok(experiments
        .iter()
        .enumerate()
        .map(|(e, exp)| {
            let rows: Vec<Vec<f64>> = (0..seeds.len()).map(|s| iou[cell(e, s)].clone()).collect();
            let all: Vec<f64> = rows.iter().flatten().copied().collect();
            let (mean_iou, std_iou) = mean_std(&all);
            let seed_means: Vec<f64> = rows.iter().map(|r| mean_std(r).0).collect();
            let (_, seed_std) = mean_std(&seed_means);
            ExperimentResult {
                experiment: *exp,
                seeds: seeds.to_vec(),
                iou: rows,
                mean_iou,
                std_iou,
                seed_means,
                seed_std,
            }
        })
        .collect())
}

pub const SWEEP_POINTS: [usize; 6] = [1, 2, 5, 10, 20, 50];
pub const SWEEP_FULL_GRID: usize = 16;

/// Point-count sweep: one row per `n_list` entry, then the full-grid reference.
pub fn run_point_sweep(
    suite: &[SyntheticInstance],
    base: &TrainConfig,
    n_list: &[usize],
    full_grid: usize,
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<ExperimentResult>> {
    let mut exps: Vec<Experiment> = n_list
        .iter()
        .map(|&n| {
            Experiment::clean(TrainConfig {
                supervision: Supervision::Points(n),
                ..*base
            })
        })
        .collect();
    exps.push(Experiment::clean(TrainConfig {
        supervision: Supervision::FullGrid(full_grid),
        ..*base
    }));
    run_experiments(suite, &exps, seeds, exec)
}

pub const ABLATION_NOISE_RATE: f64 = 0.05;

/// Coordinate mode x augmentation x label noise grid over `base`.
pub fn ablation_experiments(base: &TrainConfig) -> Vec<Experiment> {
    let coords = [
        CoordMode::None,
        CoordMode::Relative,
        match base.coords {
            c @ CoordMode::Fourier { .. } => c,
            _ => TrainConfig::default().coords,
        },
    ];
    let noises = [
        None,
        Some(NoiseConfig {
            mode: NoiseMode::Random,
            rate: ABLATION_NOISE_RATE,
        }),
        Some(NoiseConfig {
            mode: NoiseMode::Boundary,
            rate: ABLATION_NOISE_RATE,
        }),
    ];
    let mut out = Vec::new();
    for c in coords {
        for augment in [false, true] {
            for noise in noises {
                out.push(Experiment {
                    cfg: TrainConfig {
                        coords: c,
                        augment,
                        ..*base
                    },
                    noise,
                });
            }
        }
    }
    out
}

pub fn run_ablations(suite: &[SyntheticInstance], base: &TrainConfig, seeds: &[u64], exec: Exec) -> Result<Vec<ExperimentResult>> {
    run_experiments(suite, &ablation_experiments(base), seeds, exec)
}

/// Finds the result matching a coordinate label, augmentation flag and noise label.
pub fn find_result<'a>(results: &'a [ExperimentResult], coords: &str, augment: bool, noise: &str) -> Option<&'a ExperimentResult> {
    results.iter().find(|r| {
        r.experiment.cfg.coords.label() == coords && r.experiment.cfg.augment == augment && r.experiment.noise_label() == noise
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 40,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn suite_contract() {
        let a = generate_suite(20, 3).unwrap();
        assert_eq!(a, generate_suite(20, 3).unwrap());
        for s in &a {
            assert!(!s.mask.is_empty());
            let f = s.area_fraction();
            assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&f), "{f}");
            assert_eq!(s.bbox, bbox_from_mask(&s.mask).unwrap());
        }
        assert_ne!(a[0].fgrid, generate_suite(1, 4).unwrap()[0].fgrid);
        assert!(generate_suite(0, 0).is_err());
    }

    #[test]
    fn zero_points_keep_init() {
        let s = generate_instance(0, 0).unwrap();
        let cfg = quick();
        let out = train_instance(&s, &[], &cfg, 5).unwrap();
        assert_eq!(out.params, PointHeadParams::init_free(cfg.arch(), 5));
        assert!(out.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let s = generate_instance(1, 2).unwrap();
        let cfg = quick();
        let pts = supervision_points(&s, Supervision::Points(10), 7).unwrap();
        let a = train_instance(&s, &pts, &cfg, 7).unwrap();
        let b = train_instance(&s, &pts, &cfg, 7).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.final_loss().unwrap() <= a.initial_loss().unwrap());
        // logit 0 everywhere at init
        assert!((a.losses[0] - 2f64.ln() - l2_param_loss(&PointHeadParams::init_free(cfg.arch(), 7).flat, cfg.l2_weight).0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_increase_detection() {
        assert!(smoothed_increases(&[5.0, 4.0, 3.0, 2.0, 1.0], 2).is_empty());
        assert_eq!(smoothed_increases(&[3.0, 2.0, 1.0, 4.0], 2), vec![3]);
    }

    #[test]
    fn pooled_linear_descends() {
        let suite = generate_suite(3, 9).unwrap();
        let cfg = TrainConfig {
            steps: 15,
            ..TrainConfig::pooled_linear()
        };
        let pts: Vec<_> = suite.iter().map(|s| supervision_points(s, Supervision::Points(10), 1).unwrap()).collect();
        let a = train_pooled(&suite, &pts, &cfg, 1, Exec::Sequential).unwrap();
        let b = train_pooled(&suite, &pts, &cfg, 1, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.losses.last().unwrap() < &a.losses[0]);
    }

    #[test]
    fn ablation_grid_shape() {
        let exps = ablation_experiments(&TrainConfig::default());
        assert_eq!(exps.len(), 18);
        let labels: Vec<_> = exps.iter().map(|e| (e.cfg.coords.label(), e.cfg.augment, e.noise_label())).collect();
        assert!(labels.contains(&("none", true, "boundary")));
        assert!(labels.contains(&("pe", false, "clean")));
    }
}
