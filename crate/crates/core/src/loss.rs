//! Point supervision kernels: bilinear sampling of grid predictions at
//! arbitrary points, its exact adjoint, logit-space binary cross-entropy,
//! predicted-box filtering, dense grid labels and point subsampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Bitmask, BoundingBox};
use crate::sim::{keyed_rng, LabeledPoint};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridDomain {
    #[default]
    BoxNormalized,
    ImageAbsolute,
}

/// Row-major scalar field on pixel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPrediction {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub domain: GridDomain,
}

impl GridPrediction {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(crate::error::invalid("grid must be at least 1x1"));
        }
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", width * height),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::invalid("grid values must be finite"));
        }
        Ok(Self {
            width,
            height,
            values,
            domain: GridDomain::BoxNormalized,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                values.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            values,
            domain: GridDomain::BoxNormalized,
        }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn threshold(&self, level: f64) -> Bitmask {
        Bitmask::from_fn(self.width, self.height, |c, r| self.get(c, r) > level)
    }
}

/// Normalized center of cell `i` out of `n` along one axis.
#[inline]
pub fn cell_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Four grid indices and their bilinear weights for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    /// Top-left, top-right, bottom-left, bottom-right.
    pub index: [usize; 4],
    pub weight: [f64; 4],
    /// Fractional offsets `(fx, fy)` from the top-left tap.
    pub frac: [f64; 2],
}

impl Taps {
    /// Nested lerps; equal to the weighted sum up to rounding, and exact on
    /// constant neighborhoods.
    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let [fx, fy] = self.frac;
        let [a, b, c, d] = self.index.map(|i| values[i]);
        let top = a + fx * (b - a);
        let bottom = c + fx * (d - c);
        top + fy * (bottom - top)
    }
}

// Queries within this many pixels of a pixel center snap onto it, so
// normalized cell centers that round-trip through `u * W - 0.5` with a
// one-ulp error still reproduce grid values exactly.
const CENTER_SNAP: f64 = 1e-9;

fn axis_taps(n: usize, p: f64) -> (usize, usize, f64) {
    let mut p = p.clamp(0.0, (n - 1) as f64);
    let r = p.round();
    if (p - r).abs() < CENTER_SNAP {
        p = r;
    }
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

/// Taps for a query in pixel-center coordinates: the center of column `c` is
/// at `px = c`. Out-of-range queries clamp to the edge.
pub fn pixel_taps(width: usize, height: usize, px: f64, py: f64) -> Taps {
    let (x0, x1, fx) = axis_taps(width, px);
    let (y0, y1, fy) = axis_taps(height, py);
    Taps {
        index: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        frac: [fx, fy],
    }
}

/// Taps for a query in the normalized `[0, 1]^2` frame of the grid.
#[inline]
pub fn normalized_taps(width: usize, height: usize, u: f64, v: f64) -> Taps {
    pixel_taps(width, height, u * width as f64 - 0.5, v * height as f64 - 0.5)
}

pub fn sample_one(grid: &GridPrediction, u: f64, v: f64) -> f64 {
    normalized_taps(grid.width, grid.height, u, v).apply(&grid.values)
}

/// Bilinear interpolation of `grid` at normalized coordinates.
pub fn bilinear_sample(grid: &GridPrediction, coords: &[(f64, f64)]) -> Vec<f64> {
    coords.iter().map(|&(u, v)| sample_one(grid, u, v)).collect()
}

/// Adjoint of [`bilinear_sample`]: accumulates `upstream[k] * weight` into
/// every grid cell touched by query `k`.
pub fn bilinear_backward(width: usize, height: usize, coords: &[(f64, f64)], upstream: &[f64]) -> Result<Vec<f64>> {
    if coords.len() != upstream.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} upstream gradients", coords.len()),
            actual: format!("{}", upstream.len()),
        });
    }
    let mut grad = vec![0.0; width * height];
    for (&(u, v), &g) in coords.iter().zip(upstream) {
        let t = normalized_taps(width, height, u, v);
        for k in 0..4 {
            grad[t.index[k]] += g * t.weight[k];
        }
    }
    Ok(grad)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BceOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// All weights were zero; loss and gradient are zero.
    pub unsupervised: bool,
}

/// Weighted mean binary cross-entropy over logits.
pub fn point_bce(logits: &[f64], labels: &[f64], weights: &[f64]) -> Result<BceOutput> {
    if logits.len() != labels.len() || logits.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} labels and weights", logits.len()),
            actual: format!("{} labels, {} weights", labels.len(), weights.len()),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Ok(BceOutput {
            loss: 0.0,
            grad: vec![0.0; logits.len()],
            unsupervised: true,
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for ((&z, &y), &w) in logits.iter().zip(labels).zip(weights) {
        if w != 0.0 {
            loss += w * bce_with_logit(z, y);
        }
        grad.push((sigmoid(z) - y) * w / total);
    }
    Ok(BceOutput {
        loss: loss / total,
        grad,
        unsupervised: false,
    })
}

/// Points in the normalized frame of a box, with per-point supervision weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointBatch {
    pub coords: Vec<(f64, f64)>,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

/// Re-expresses image-absolute points in the predicted box's frame and drops
/// (weight 0) the ones outside it.
pub fn filter_points_to_box(points: &[LabeledPoint], predicted: &BoundingBox) -> PointBatch {
    let valid = predicted.is_valid();
    let mut batch = PointBatch::default();
    for p in points {
        let (coord, w) = if valid {
            (predicted.to_normalized(p.x, p.y), predicted.contains(p.x, p.y) as u8 as f64)
        } else {
            ((0.0, 0.0), 0.0)
        };
        batch.coords.push(coord);
        batch.labels.push(p.label.target());
        batch.weights.push(w);
    }
    batch
}

/// Image-absolute centers of a `grid_w x grid_h` lattice laid over `bbox`, row-major.
pub fn grid_cell_points(bbox: &BoundingBox, grid_w: usize, grid_h: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for j in 0..grid_h {
        for i in 0..grid_w {
            out.push(bbox.from_normalized(cell_center(i, grid_w), cell_center(j, grid_h)));
        }
    }
    out
}

/// Dense labels for full-mask supervision: each cell takes the mask value of
/// the image pixel containing its center (background outside the image).
pub fn grid_labels_from_mask(mask: &Bitmask, bbox: &BoundingBox, grid_w: usize, grid_h: usize) -> Vec<f64> {
    grid_cell_points(bbox, grid_w, grid_h)
        .into_iter()
        .map(|(x, y)| mask.at_point(x, y).unwrap_or(false) as u8 as f64)
        .collect()
}

const AUGMENT_TAG: u64 = 0x6175_676d; // "augm"

/// Sorted indices of a uniformly chosen `ceil(n/2)` subset of `0..n`.
/// Deterministic per `(seed, iteration)`.
pub fn augment_indices(n: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut rng = keyed_rng(seed, AUGMENT_TAG, iteration);
    let mut idx = index::sample(&mut rng, n, n.div_ceil(2)).into_vec();
    idx.sort_unstable();
    idx
}

/// Keeps a uniformly chosen `ceil(n/2)` subset, in original order.
pub fn augment_subsample(batch: &PointBatch, seed: u64, iteration: u64) -> PointBatch {
    batch.select(&augment_indices(batch.len(), seed, iteration))
}

/// Mean of per-instance losses, skipping instances without supervision.
pub fn mean_over_instances(per_instance: &[BceOutput]) -> f64 {
    let used: Vec<f64> = per_instance.iter().filter(|o| !o.unsupervised).map(|o| o.loss).collect();
    if used.is_empty() {
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    }
}
