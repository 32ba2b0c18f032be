//! Mask representations and the geometry shared by every other module.
//!
//! Pixel `(col, row)` covers `[col, col + 1) x [row, row + 1)` and has its
//! center at `(col + 0.5, row + 0.5)`. Rasterization, point labeling,
//! bilinear sampling and rendering all use this convention.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Axis-aligned box in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if !(x.is_finite() && y.is_finite()) {
            return Err(invalid("box origin must be finite"));
        }
        if !b.is_valid() {
            return Err(Error::DegenerateBox { w, h });
        }
        Ok(b)
    }

    /// Positive finite extent on both axes.
    pub fn is_valid(&self) -> bool {
        self.w.is_finite() && self.h.is_finite() && self.w > 0.0 && self.h > 0.0
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Closed containment test (points on the edges count as inside).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.right() && y >= self.y && y <= self.bottom()
    }

    /// Image point to the box frame, `(0, 0)` top-left and `(1, 1)` bottom-right.
    pub fn to_normalized(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x) / self.w, (y - self.y) / self.h)
    }

    pub fn from_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x + u * self.w, self.y + v * self.h)
    }

    /// Coordinates relative to the box center, scaled by box size into `[-0.5, 0.5]`.
    pub fn relative_to_center(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center();
        ((x - cx) / self.w, (y - cy) / self.h)
    }

    /// Grows each side by `frac` of the box extent.
    pub fn expand(&self, frac: f64) -> Self {
        Self {
            x: self.x - frac * self.w,
            y: self.y - frac * self.h,
            w: self.w * (1.0 + 2.0 * frac),
            h: self.h * (1.0 + 2.0 * frac),
        }
    }

    /// Intersection with `[0, width) x [0, height)`; `None` when empty.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<Self> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        (x1 > x0 && y1 > y0).then(|| Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Bitmask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} bits", width * height),
                actual: format!("{} bits", bits.len()),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                bits.push(f(col, row));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    /// Value of the pixel containing the continuous point, `None` outside the image.
    pub fn at_point(&self, x: f64, y: f64) -> Option<bool> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (col, row) = (x.floor() as usize, y.floor() as usize);
        (col < self.width && row < self.height).then(|| self.get(col, row))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn invert(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Output of [`rasterize_polygon`].
#[derive(Clone, Debug)]
pub struct Raster {
    pub mask: Bitmask,
    /// Set when every ring has zero signed area; the mask is then all background.
    pub degenerate: bool,
}

/// Even-odd fill of closed rings. A pixel is foreground iff its center is
/// inside an odd number of rings.
pub fn rasterize_polygon(rings: &[Vec<[f64; 2]>], width: usize, height: usize) -> Result<Raster> {
    if rings.is_empty() {
        return Err(invalid("empty ring list"));
    }
    for ring in rings {
        if ring.len() < 3 {
            return Err(invalid(format!("ring has {} vertices, need >= 3", ring.len())));
        }
        if ring.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid("ring coordinate is not finite"));
        }
    }

    let mut mask = Bitmask::new(width, height);
    if rings.iter().all(|r| shoelace_area(r) == 0.0) {
        return Ok(Raster {
            mask,
            degenerate: true,
        });
    }

    let mut crossings = Vec::new();
    for row in 0..height {
        let py = row as f64 + 0.5;
        crossings.clear();
        for ring in rings {
            for (i, a) in ring.iter().enumerate() {
                let b = &ring[(i + 1) % ring.len()];
                if (a[1] > py) != (b[1] > py) {
                    crossings.push(a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        // Center px is inside iff x_{2k} <= px < x_{2k+1} for some k.
        for pair in crossings.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            if end <= start {
                continue;
            }
            for col in start as usize..end as usize {
                mask.set(col, row, true);
            }
        }
    }
    Ok(Raster {
        mask,
        degenerate: false,
    })
}

fn shoelace_area(ring: &[[f64; 2]]) -> f64 {
    let mut acc = 0.0;
    for (i, a) in ring.iter().enumerate() {
        let b = &ring[(i + 1) % ring.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Uncompressed run-length encoding, column-major, first run is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u64>,
    /// `[height, width]`
    pub size: [usize; 2],
}

pub fn rle_encode(mask: &Bitmask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for col in 0..mask.width {
        for row in 0..mask.height {
            let v = mask.get(col, row);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        counts,
        size: [mask.height, mask.width],
    }
}

pub fn rle_decode(rle: &Rle) -> Result<Bitmask> {
    let [height, width] = rle.size;
    let expected = (height * width) as u64;
    let sum: u64 = rle.counts.iter().sum();
    if sum != expected {
        return Err(Error::RleCountMismatch { sum, expected });
    }
    let mut mask = Bitmask::new(width, height);
    let mut idx = 0usize;
    for (i, &run) in rle.counts.iter().enumerate() {
        let fg = i % 2 == 1;
        for k in idx..idx + run as usize {
            if fg {
                // column-major linear index k -> (col, row)
                mask.set(k / height, k % height, true);
            }
        }
        idx += run as usize;
    }
    Ok(mask)
}

/// Tight box around the foreground pixels, in pixel-edge coordinates.
pub fn bbox_from_mask(mask: &Bitmask) -> Result<BoundingBox> {
    let (mut c0, mut r0, mut c1, mut r1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(col, row) {
                c0 = c0.min(col);
                r0 = r0.min(row);
                c1 = c1.max(col);
                r1 = r1.max(row);
            }
        }
    }
    if c0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BoundingBox {
        x: c0 as f64,
        y: r0 as f64,
        w: (c1 - c0 + 1) as f64,
        h: (r1 - r0 + 1) as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceMethod {
    /// Exact nearest-opposite search.
    #[default]
    Exact,
    /// Two-pass vector propagation. Fast, may overestimate by a fraction of a pixel.
    TwoPass,
}

/// Per-pixel distance from each pixel center to the nearest center of the
/// opposite label.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// The mask had a single label; distances are measured to the ring of
    /// virtual opposite-label pixels just outside the image.
    pub single_label: bool,
}

impl DistanceField {
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Distance of the pixel containing the point, `None` outside the image.
    pub fn at_point(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (col, row) = (x.floor() as usize, y.floor() as usize);
        (col < self.width && row < self.height).then(|| self.get(col, row))
    }
}

pub fn boundary_distance(mask: &Bitmask) -> DistanceField {
    boundary_distance_with(mask, DistanceMethod::Exact)
}

pub fn boundary_distance_with(mask: &Bitmask, method: DistanceMethod) -> DistanceField {
    let (w, h) = (mask.width, mask.height);
    let fg = mask.count();
    if fg == 0 || fg == w * h {
        let values = (0..h)
            .flat_map(|row| {
                (0..w).map(move |col| (col + 1).min(row + 1).min(w - col).min(h - row) as f64)
            })
            .collect();
        return DistanceField {
            width: w,
            height: h,
            values,
            single_label: true,
        };
    }
    let values = match method {
        DistanceMethod::Exact => exact_distances(mask),
        DistanceMethod::TwoPass => two_pass_distances(mask),
    };
    DistanceField {
        width: w,
        height: h,
        values,
        single_label: false,
    }
}

// Expanding square rings around each pixel; stops once the ring radius
// alone exceeds the best distance found.
fn exact_distances(mask: &Bitmask) -> Vec<f64> {
    let (w, h) = (mask.width as isize, mask.height as isize);
    let max_r = w.max(h);
    let mut out = Vec::with_capacity((w * h) as usize);
    for row in 0..h {
        for col in 0..w {
            let label = mask.get(col as usize, row as usize);
            let mut best = i64::MAX;
            let probe = |c: isize, r: isize, best: &mut i64| {
                if c >= 0 && r >= 0 && c < w && r < h && mask.get(c as usize, r as usize) != label
                {
                    let (dc, dr) = ((c - col) as i64, (r - row) as i64);
                    *best = (*best).min(dc * dc + dr * dr);
                }
            };
            for rad in 1..=max_r {
                if (rad as i64) * (rad as i64) >= best {
                    break;
                }
                for d in -rad..=rad {
                    probe(col + d, row - rad, &mut best);
                    probe(col + d, row + rad, &mut best);
                }
                for d in -rad + 1..rad {
                    probe(col - rad, row + d, &mut best);
                    probe(col + rad, row + d, &mut best);
                }
            }
            out.push((best as f64).sqrt());
        }
    }
    out
}

fn two_pass_distances(mask: &Bitmask) -> Vec<f64> {
    let to_fg = propagate_nearest(mask, true);
    let to_bg = propagate_nearest(mask, false);
    mask.bits
        .iter()
        .enumerate()
        .map(|(i, &b)| if b { to_bg[i] } else { to_fg[i] })
        .collect()
}

/// Distance from every pixel center to the nearest pixel with value `target`,
/// via forward/backward sweeps carrying nearest-site offsets.
fn propagate_nearest(mask: &Bitmask, target: bool) -> Vec<f64> {
    let (w, h) = (mask.width as isize, mask.height as isize);
    const FAR: (i64, i64) = (1 << 20, 1 << 20);
    let mut off: Vec<(i64, i64)> = mask
        .bits
        .iter()
        .map(|&b| if b == target { (0, 0) } else { FAR })
        .collect();
    let d2 = |o: (i64, i64)| o.0 * o.0 + o.1 * o.1;
    let relax = |off: &mut Vec<(i64, i64)>, col: isize, row: isize, dc: isize, dr: isize| {
        let (nc, nr) = (col + dc, row + dr);
        if nc < 0 || nr < 0 || nc >= w || nr >= h {
            return;
        }
        let n = off[(nr * w + nc) as usize];
        if n == FAR {
            return;
        }
        let cand = (n.0 - dc as i64, n.1 - dr as i64);
        let i = (row * w + col) as usize;
        if d2(cand) < d2(off[i]) {
            off[i] = cand;
        }
    };
    for row in 0..h {
        for col in 0..w {
            for (dc, dr) in [(-1, 0), (-1, -1), (0, -1), (1, -1)] {
                relax(&mut off, col, row, dc, dr);
            }
        }
        for col in (0..w).rev() {
            relax(&mut off, col, row, 1, 0);
        }
    }
    for row in (0..h).rev() {
        for col in (0..w).rev() {
            for (dc, dr) in [(1, 0), (1, 1), (0, 1), (-1, 1)] {
                relax(&mut off, col, row, dc, dr);
            }
        }
        for col in 0..w {
            relax(&mut off, col, row, -1, 0);
        }
    }
    off.into_iter().map(|o| (d2(o) as f64).sqrt()).collect()
}

/// Intersection over union; 1.0 when both masks are empty.
pub fn mask_iou(a: &Bitmask, b: &Bitmask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.width, a.height),
            actual: format!("{}x{}", b.width, b.height),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}
