//! Simulated point annotation: random points inside each instance box,
//! labeled from the ground-truth mask, with optional label noise and
//! boundary-biased sampling variants.
//!
//! Every instance draws from its own ChaCha stream keyed by
//! `(seed, instance_id)`, so adding or removing instances never changes the
//! points of the others, and the annotation service can regenerate exactly
//! the same task sequence.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, InstanceRecord};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::mask::{boundary_distance, BoundingBox, DistanceField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Object,
    Background,
}

impl PointLabel {
    pub fn from_foreground(fg: bool) -> Self {
        if fg {
            Self::Object
        } else {
            Self::Background
        }
    }

    pub fn is_object(self) -> bool {
        self == Self::Object
    }

    pub fn flipped(self) -> Self {
        Self::from_foreground(!self.is_object())
    }

    /// 1.0 for object, 0.0 for background.
    pub fn target(self) -> f64 {
        if self.is_object() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    #[default]
    Simulated,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
    pub source: PointSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    None,
    /// Flip uniformly chosen points, dataset-wide.
    Random,
    /// Flip the points closest to the object boundary.
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMeta {
    pub n_points: usize,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    pub noise_rate: f64,
}

/// `N` labeled points for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PointAnnotation {
    pub instance_id: u64,
    pub points: Vec<LabeledPoint>,
    pub meta: AnnotationMeta,
}

// ---------------------------------------------------------------------------
// File format

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileMeta {
    pub n_points: usize,
    pub seed: u64,
    pub noise_mode: NoiseMode,
    pub noise_rate: f64,
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PointSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilePoint {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileAnnotation {
    pub instance_id: u64,
    pub points: Vec<FilePoint>,
}

/// On-disk point annotation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotationFile {
    pub meta: FileMeta,
    pub annotations: Vec<FileAnnotation>,
}

impl PointAnnotationFile {
    pub fn from_annotations(
        dataset_id: &str,
        meta: AnnotationMeta,
        source: Option<PointSource>,
        annotations: &[PointAnnotation],
    ) -> Self {
        Self {
            meta: FileMeta {
                n_points: meta.n_points,
                seed: meta.seed,
                noise_mode: meta.noise_mode,
                noise_rate: meta.noise_rate,
                dataset_id: dataset_id.to_string(),
                source,
            },
            annotations: annotations
                .iter()
                .map(|a| FileAnnotation {
                    instance_id: a.instance_id,
                    points: a
                        .points
                        .iter()
                        .map(|p| FilePoint {
                            x: p.x,
                            y: p.y,
                            label: p.label,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_annotations(&self) -> Vec<PointAnnotation> {
        let meta = AnnotationMeta {
            n_points: self.meta.n_points,
            seed: self.meta.seed,
            noise_mode: self.meta.noise_mode,
            noise_rate: self.meta.noise_rate,
        };
        let source = self.meta.source.unwrap_or_default();
        self.annotations
            .iter()
            .map(|a| PointAnnotation {
                instance_id: a.instance_id,
                points: a
                    .points
                    .iter()
                    .map(|p| LabeledPoint {
                        x: p.x,
                        y: p.y,
                        label: p.label,
                        source,
                    })
                    .collect(),
                meta,
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// RNG streams

const POINTS_TAG: u64 = 0x706f_696e_7473; // "points"
const NOISE_TAG: u64 = 0x6e6f_6973_65; // "noise"

/// ChaCha stream keyed by `(seed, tag)` and selected by `stream`.
pub fn keyed_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// The point-location stream for one instance.
pub fn instance_rng(seed: u64, instance_id: u64) -> ChaCha8Rng {
    keyed_rng(seed, POINTS_TAG, instance_id)
}

// ---------------------------------------------------------------------------
// Operations

/// `n` i.i.d. points uniform over the half-open box `[x, x+w) x [y, y+h)`.
pub fn sample_uniform_points<R: Rng + ?Sized>(
    bbox: &BoundingBox,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if !bbox.is_valid() {
        return Err(Error::DegenerateBox { w: bbox.w, h: bbox.h });
    }
    Ok((0..n)
        .map(|_| {
            let x = bbox.x + rng.random::<f64>() * bbox.w;
            let y = bbox.y + rng.random::<f64>() * bbox.h;
            (x.min(bbox.right().next_down()), y.min(bbox.bottom().next_down()))
        })
        .collect())
}

/// Labels each point by the ground-truth pixel containing it.
pub fn label_points(points: &[(f64, f64)], instance: &InstanceRecord) -> Result<Vec<LabeledPoint>> {
    points
        .iter()
        .map(|&(x, y)| {
            let fg = instance.mask.at_point(x, y).ok_or(Error::PointOutsideImage {
                x,
                y,
                width: instance.mask.width(),
                height: instance.mask.height(),
            })?;
            Ok(LabeledPoint {
                x,
                y,
                label: PointLabel::from_foreground(fg),
                source: PointSource::Simulated,
            })
        })
        .collect()
}

/// Mixture sampler: with probability `beta` a point is drawn uniformly from
/// pixels within `max_distance` of the boundary (jittered inside the pixel),
/// otherwise uniformly from the box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryBias {
    pub beta: f64,
    pub max_distance: f64,
}

impl BoundaryBias {
    pub const DEFAULT_MAX_DISTANCE: f64 = 2.0;

    pub fn mild() -> Self {
        Self {
            beta: 0.5,
            max_distance: Self::DEFAULT_MAX_DISTANCE,
        }
    }

    pub fn heavy() -> Self {
        Self {
            beta: 1.0,
            max_distance: Self::DEFAULT_MAX_DISTANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedSample {
    pub points: Vec<(f64, f64)>,
    /// No pixel in the box was within `max_distance`; sampling fell back to uniform.
    pub fell_back: bool,
}

pub fn sample_boundary_biased<R: Rng + ?Sized>(
    instance: &InstanceRecord,
    n: usize,
    bias: BoundaryBias,
    rng: &mut R,
) -> Result<BiasedSample> {
    let field = boundary_distance(&instance.mask);
    sample_boundary_biased_with(instance, &field, n, bias, rng)
}

/// Pixels inside `bbox` whose boundary distance is at most `max_distance`.
pub fn near_boundary_pixels(field: &DistanceField, bbox: &BoundingBox, max_distance: f64) -> Vec<(usize, usize)> {
    let c0 = bbox.x.floor().max(0.0) as usize;
    let r0 = bbox.y.floor().max(0.0) as usize;
    let c1 = (bbox.right().ceil() as usize).min(field.width);
    let r1 = (bbox.bottom().ceil() as usize).min(field.height);
    let mut out = Vec::new();
    for row in r0..r1 {
        for col in c0..c1 {
            if field.get(col, row) <= max_distance {
                out.push((col, row));
            }
        }
    }
    out
}

pub fn sample_boundary_biased_with<R: Rng + ?Sized>(
    instance: &InstanceRecord,
    field: &DistanceField,
    n: usize,
    bias: BoundaryBias,
    rng: &mut R,
) -> Result<BiasedSample> {
    if !(0.0..=1.0).contains(&bias.beta) {
        return Err(invalid(format!("bias beta {} outside [0, 1]", bias.beta)));
    }
    let bbox = instance.bbox;
    if bias.beta == 0.0 {
        return Ok(BiasedSample {
            points: sample_uniform_points(&bbox, n, rng)?,
            fell_back: false,
        });
    }
    let near = near_boundary_pixels(field, &bbox, bias.max_distance);
    if near.is_empty() {
        return Ok(BiasedSample {
            points: sample_uniform_points(&bbox, n, rng)?,
            fell_back: true,
        });
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let from_boundary = bias.beta >= 1.0 || rng.random::<f64>() < bias.beta;
        if from_boundary {
            let (col, row) = near[rng.random_range(0..near.len())];
            let x = (col as f64 + rng.random::<f64>()).clamp(bbox.x, bbox.right().next_down());
            let y = (row as f64 + rng.random::<f64>()).clamp(bbox.y, bbox.bottom().next_down());
            points.push((x, y));
        } else {
            points.extend(sample_uniform_points(&bbox, 1, rng)?);
        }
    }
    Ok(BiasedSample {
        points,
        fell_back: false,
    })
}

/// `floor(rate * total)`, tolerant of decimal rates like 0.29 that land a
/// hair under an integer in binary floating point.
pub fn flip_count(rate: f64, total: usize) -> usize {
    ((rate * total as f64 + 1e-9).floor() as usize).min(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyAnnotations {
    pub annotations: Vec<PointAnnotation>,
    /// `(instance_id, point index)` of every flipped label.
    pub flipped: Vec<(u64, usize)>,
}

/// Flips exactly `floor(rate * total_points)` labels dataset-wide.
///
/// `Random` picks uniformly among all points. `Boundary` flips the points with
/// the smallest ground-truth boundary distance, ties broken by
/// `(instance_id, point index)` ascending; it needs the instances to look up
/// masks.
pub fn inject_label_noise(
    annotations: &[PointAnnotation],
    instances: &[InstanceRecord],
    rate: f64,
    mode: NoiseMode,
    rng_seed: u64,
) -> Result<NoisyAnnotations> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!("noise rate {rate} outside [0, 1]")));
    }
    let slots: Vec<(usize, usize)> = annotations
        .iter()
        .enumerate()
        .flat_map(|(a, ann)| (0..ann.points.len()).map(move |p| (a, p)))
        .collect();
    let k = flip_count(rate, slots.len());

    let chosen: Vec<(usize, usize)> = match mode {
        NoiseMode::None => Vec::new(),
        NoiseMode::Random => {
            let mut rng = keyed_rng(rng_seed, NOISE_TAG, 0);
            let mut picked: Vec<usize> = index::sample(&mut rng, slots.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| slots[i]).collect()
        }
        NoiseMode::Boundary => {
            let by_id: HashMap<u64, &InstanceRecord> = instances.iter().map(|i| (i.instance_id, i)).collect();
            let mut fields: HashMap<u64, DistanceField> = HashMap::new();
            let mut keyed = Vec::with_capacity(slots.len());
            for &(a, p) in &slots {
                let ann = &annotations[a];
                let inst = by_id
                    .get(&ann.instance_id)
                    .ok_or_else(|| Error::Dataset(format!("no instance {}", ann.instance_id)))?;
                let field = fields
                    .entry(ann.instance_id)
                    .or_insert_with(|| boundary_distance(&inst.mask));
                let pt = &ann.points[p];
                let d = field.at_point(pt.x, pt.y).ok_or(Error::PointOutsideImage {
                    x: pt.x,
                    y: pt.y,
                    width: field.width,
                    height: field.height,
                })?;
                keyed.push((d, ann.instance_id, p, a));
            }
            keyed.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)).then(l.2.cmp(&r.2)));
            keyed.into_iter().take(k).map(|(_, _, p, a)| (a, p)).collect()
        }
    };

    let mut out = annotations.to_vec();
    for ann in &mut out {
        ann.meta.noise_mode = mode;
        ann.meta.noise_rate = if mode == NoiseMode::None { 0.0 } else { rate };
    }
    let mut flipped = Vec::with_capacity(chosen.len());
    for (a, p) in chosen {
        let pt = &mut out[a].points[p];
        pt.label = pt.label.flipped();
        flipped.push((out[a].instance_id, p));
    }
    Ok(NoisyAnnotations {
        annotations: out,
        flipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub rate: f64,
}

/// Points and labels for one instance, using the box re-derived from its mask.
pub fn simulate_instance(instance: &InstanceRecord, n_points: usize, seed: u64) -> Result<PointAnnotation> {
    let inst = instance.with_derived_bbox()?;
    let mut rng = instance_rng(seed, inst.instance_id);
    let pts = sample_uniform_points(&inst.bbox, n_points, &mut rng)?;
    Ok(PointAnnotation {
        instance_id: inst.instance_id,
        points: label_points(&pts, &inst)?,
        meta: AnnotationMeta {
            n_points,
            seed,
            noise_mode: NoiseMode::None,
            noise_rate: 0.0,
        },
    })
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub file: PointAnnotationFile,
    pub annotations: Vec<PointAnnotation>,
    /// Instances with empty masks, left out of the file.
    pub skipped: Vec<u64>,
    pub flipped: Vec<(u64, usize)>,
}

/// One annotation per non-empty instance, in dataset order.
pub fn simulate_dataset(
    dataset: &Dataset,
    n_points: usize,
    seed: u64,
    noise: Option<NoiseConfig>,
    exec: Exec,
) -> Result<Simulation> {
    let results = exec.map(&dataset.instances, |inst| {
        if inst.mask.is_empty() {
            Ok(None)
        } else {
            simulate_instance(inst, n_points, seed).map(Some)
        }
    });
    let mut annotations = Vec::new();
    let mut skipped = Vec::new();
    for (inst, r) in dataset.instances.iter().zip(results) {
        match r? {
            Some(a) => annotations.push(a),
            None => skipped.push(inst.instance_id),
        }
    }
    let mut flipped = Vec::new();
    if let Some(cfg) = noise.filter(|c| c.mode != NoiseMode::None) {
        let noisy = inject_label_noise(&annotations, &dataset.instances, cfg.rate, cfg.mode, seed)?;
        annotations = noisy.annotations;
        flipped = noisy.flipped;
    }
    let meta = AnnotationMeta {
        n_points,
        seed,
        noise_mode: noise.map_or(NoiseMode::None, |c| c.mode),
        noise_rate: noise.filter(|c| c.mode != NoiseMode::None).map_or(0.0, |c| c.rate),
    };
    Ok(Simulation {
        file: PointAnnotationFile::from_annotations(&dataset.id, meta, None, &annotations),
        annotations,
        skipped,
        flipped,
    })
}

/// Fraction of labels that match the ground-truth pixel lookup; 1.0 for an
/// annotation with no points.
pub fn agreement(annotation: &PointAnnotation, instance: &InstanceRecord) -> Result<f64> {
    let (agree, total) = agreement_counts(annotation, instance)?;
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}

pub fn agreement_counts(annotation: &PointAnnotation, instance: &InstanceRecord) -> Result<(usize, usize)> {
    let coords: Vec<(f64, f64)> = annotation.points.iter().map(|p| (p.x, p.y)).collect();
    let truth = label_points(&coords, instance)?;
    let agree = annotation
        .points
        .iter()
        .zip(&truth)
        .filter(|(a, t)| a.label == t.label)
        .count();
    Ok((agree, truth.len()))
}

/// Agreement pooled over every point of every annotation; `None` without points.
pub fn pooled_agreement(annotations: &[PointAnnotation], dataset: &Dataset) -> Result<Option<f64>> {
    let (mut agree, mut total) = (0, 0);
    for ann in annotations {
        let inst = dataset
            .instance(ann.instance_id)
            .ok_or_else(|| Error::Dataset(format!("no instance {}", ann.instance_id)))?;
        let (a, t) = agreement_counts(ann, inst)?;
        agree += a;
        total += t;
    }
    Ok((total > 0).then(|| agree as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BboxSource;
    use crate::mask::{Bitmask, BoundingBox};

    fn record(id: u64, mask: Bitmask) -> InstanceRecord {
        InstanceRecord {
            instance_id: id,
            image_id: 1,
            category: "thing".into(),
            bbox: crate::mask::bbox_from_mask(&mask).unwrap(),
            bbox_source: BboxSource::DerivedFromMask,
            mask,
        }
    }

    fn half_plane() -> InstanceRecord {
        let mut inst = record(1, Bitmask::from_fn(8, 8, |c, _| c < 4));
        inst.bbox = BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        inst
    }

    #[test]
    fn uniform_support_and_determinism() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let p = sample_uniform_points(&b, 1, &mut instance_rng(3, 0)).unwrap();
        assert!(p[0].0 >= 0.0 && p[0].0 < 1.0 && p[0].1 >= 0.0 && p[0].1 < 1.0);
        let b = BoundingBox::new(2.0, 3.0, 5.0, 7.0).unwrap();
        let a = sample_uniform_points(&b, 50, &mut instance_rng(9, 4)).unwrap();
        let c = sample_uniform_points(&b, 50, &mut instance_rng(9, 4)).unwrap();
        assert_eq!(a, c);
        let bad = BoundingBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 };
        assert!(sample_uniform_points(&bad, 1, &mut instance_rng(0, 0)).is_err());
    }

    #[test]
    fn labels_follow_containing_pixel() {
        let inst = half_plane();
        let l = label_points(&[(1.5, 1.5), (5.5, 2.5), (3.99, 0.2), (4.0, 0.2)], &inst).unwrap();
        let labels: Vec<_> = l.iter().map(|p| p.label).collect();
        assert_eq!(
            labels,
            vec![PointLabel::Object, PointLabel::Background, PointLabel::Object, PointLabel::Background]
        );
        assert!(label_points(&[(8.0, 1.0)], &inst).is_err());
        assert!(label_points(&[(-0.1, 1.0)], &inst).is_err());
    }

    #[test]
    fn noise_extremes() {
        let inst = half_plane();
        let ann = simulate_instance(&inst, 20, 1).unwrap();
        let same = inject_label_noise(&[ann.clone()], &[inst.clone()], 0.0, NoiseMode::Random, 0).unwrap();
        assert_eq!(same.annotations[0].points, ann.points);
        assert!(same.flipped.is_empty());
        let all = inject_label_noise(&[ann.clone()], &[inst.clone()], 1.0, NoiseMode::Boundary, 0).unwrap();
        for (a, b) in all.annotations[0].points.iter().zip(&ann.points) {
            assert_eq!(a.label, b.label.flipped());
        }
        assert!(inject_label_noise(&[ann], &[inst], 1.5, NoiseMode::Random, 0).is_err());
    }

    #[test]
    fn flip_count_floors() {
        assert_eq!(flip_count(0.05, 200), 10);
        assert_eq!(flip_count(0.05, 199), 9);
        assert_eq!(flip_count(0.29, 100), 29);
        assert_eq!(flip_count(1.0, 7), 7);
    }

    #[test]
    fn biased_beta_zero_equals_uniform() {
        let inst = record(5, Bitmask::from_fn(32, 32, |c, r| {
            let (dx, dy) = (c as f64 - 15.5, r as f64 - 15.5);
            dx * dx + dy * dy < 100.0
        }));
        let bias = BoundaryBias { beta: 0.0, ..BoundaryBias::mild() };
        let a = sample_boundary_biased(&inst, 100, bias, &mut instance_rng(1, 5)).unwrap();
        let b = sample_uniform_points(&inst.bbox, 100, &mut instance_rng(1, 5)).unwrap();
        assert_eq!(a.points, b);
    }

    #[test]
    fn biased_fallback_when_no_boundary_in_box() {
        // boundary pixels exist but not inside the given box
        let mut inst = record(2, Bitmask::from_fn(40, 40, |c, _| c < 20));
        inst.bbox = BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap();
        let s = sample_boundary_biased(&inst, 10, BoundaryBias::heavy(), &mut instance_rng(0, 2)).unwrap();
        assert!(s.fell_back);
        assert_eq!(s.points.len(), 10);
        assert!(s.points.iter().all(|&(x, y)| inst.bbox.contains(x, y)));
    }

    #[test]
    fn agreement_of_clean_and_flipped() {
        let inst = half_plane();
        let ann = simulate_instance(&inst, 20, 4).unwrap();
        assert_eq!(agreement(&ann, &inst).unwrap(), 1.0);
        let noisy = inject_label_noise(&[ann], &[inst.clone()], 0.05, NoiseMode::Random, 3).unwrap();
        assert_eq!(noisy.flipped.len(), 1);
        assert_eq!(agreement(&noisy.annotations[0], &inst).unwrap(), 0.95);
    }
}
