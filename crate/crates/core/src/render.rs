//! Adaptive subdivision rendering of a point-evaluable mask function.
//!
//! Starts from a coarse grid evaluated densely, then repeatedly doubles the
//! resolution by bilinear upsampling and re-evaluates only the most uncertain
//! cells.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::head::{fill_head_input, forward_input, Activations, FeatureGrid, PointHeadParams, PositionEncoder};
use crate::loss::{cell_center, sample_one, sigmoid, GridPrediction};
use crate::mask::BoundingBox;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderSpace {
    /// Point function returns probabilities; uncertainty is `-|p - 0.5|`.
    #[default]
    Probability,
    /// Point function returns logits; uncertainty is `-|z|`.
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub start_res: usize,
    pub target_res: usize,
    pub n_select: usize,
    pub space: RenderSpace,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            start_res: 28,
            target_res: 224,
            n_select: 28 * 28,
            space: RenderSpace::Probability,
        }
    }
}

impl RenderConfig {
    /// Number of x2 subdivision steps.
    pub fn steps(&self) -> Result<u32> {
        if self.start_res == 0 || self.target_res < self.start_res || self.target_res % self.start_res != 0 {
            return Err(invalid(format!(
                "target {} is not a power-of-two multiple of start {}",
                self.target_res, self.start_res
            )));
        }
        let ratio = self.target_res / self.start_res;
        if !ratio.is_power_of_two() {
            return Err(invalid(format!("resolution ratio {ratio} is not a power of two")));
        }
        if self.n_select == 0 {
            return Err(invalid("n_select must be >= 1"));
        }
        Ok(ratio.trailing_zeros())
    }

    /// Point-function evaluations [`render`] will perform.
    pub fn eval_count(&self) -> Result<usize> {
        let steps = self.steps()?;
        let mut res = self.start_res;
        let mut total = res * res;
        for _ in 0..steps {
            res *= 2;
            total += self.n_select.min(res * res);
        }
        Ok(total)
    }
}

/// Doubles both dimensions; each new cell samples the source grid at its
/// own normalized center.
pub fn upsample_x2(grid: &GridPrediction) -> GridPrediction {
    let (w, h) = (grid.width * 2, grid.height * 2);
    let mut out = GridPrediction::from_fn(w, h, |c, r| sample_one(grid, cell_center(c, w), cell_center(r, h)));
    out.domain = grid.domain;
    out
}

/// Higher is more uncertain; 0 at p = 0.5.
#[inline]
pub fn uncertainty(prob: f64) -> f64 {
    -(prob - 0.5).abs()
}

#[inline]
fn score(space: RenderSpace, v: f64) -> f64 {
    match space {
        RenderSpace::Probability => uncertainty(v),
        RenderSpace::Logit => -v.abs(),
    }
}

/// Indices of the `k` highest scores; ties go to the lower row-major index.
pub fn most_uncertain(values: &[f64], k: usize, space: RenderSpace) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: &usize| score(space, values[*i]);
    let cmp = |a: &usize, b: &usize| key(b).total_cmp(&key(a)).then(a.cmp(b));
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_unstable_by(cmp);
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub grid: GridPrediction,
    pub eval_count: usize,
}

/// Renders `point_fn` over the normalized box frame at `cfg.target_res`.
///
/// `point_fn` maps a normalized `(u, v)` to a probability (or a logit with
/// [`RenderSpace::Logit`]). Evaluations within a step run through `exec`.
pub fn render<F>(point_fn: F, cfg: &RenderConfig, exec: Exec) -> Result<Rendered>
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    let steps = cfg.steps()?;
    let n = cfg.start_res;
    let coords: Vec<(f64, f64)> = (0..n * n).map(|i| (cell_center(i % n, n), cell_center(i / n, n))).collect();
    let values = exec.map(&coords, |&(u, v)| point_fn(u, v));
    let mut grid = GridPrediction::from_fn(n, n, |c, r| values[r * n + c]);
    let mut eval_count = n * n;

    for _ in 0..steps {
        grid = upsample_x2(&grid);
        let res = grid.width;
        let picked = most_uncertain(&grid.values, cfg.n_select, cfg.space);
        let fresh = exec.map(&picked, |&i| point_fn(cell_center(i % res, res), cell_center(i / res, res)));
        for (&i, v) in picked.iter().zip(fresh) {
            grid.values[i] = v;
        }
        eval_count += picked.len();
    }
    Ok(Rendered { grid, eval_count })
}

/// Head probability at the normalized box position `(u, v)`.
pub fn head_probability(
    params: &PointHeadParams,
    encoder: &PositionEncoder,
    fgrid: &FeatureGrid,
    bbox: &BoundingBox,
    u: f64,
    v: f64,
) -> f64 {
    let (x, y) = bbox.from_normalized(u, v);
    let mut row = vec![0.0; params.arch.input_dim()];
    fill_head_input(fgrid, bbox, encoder, x, y, &mut row);
    sigmoid(forward_input(params, &row, &mut Activations::new(&params.arch)))
}

/// Evaluates `point_fn` at every cell center of a `res x res` grid.
pub fn render_dense<F>(point_fn: F, res: usize, exec: Exec) -> GridPrediction
where
    F: Fn(f64, f64) -> f64 + Sync + Send,
{
    let values = exec.map_range(res * res, |i| point_fn(cell_center(i % res, res), cell_center(i / res, res)));
    GridPrediction::from_fn(res, res, |c, r| values[r * res + c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty(0.5), 0.0);
        assert_eq!(uncertainty(0.0), -0.5);
        assert_eq!(uncertainty(1.0), -0.5);
        // 0.1 and 0.9 tie (up to rounding of 0.9 - 0.5); lower index wins
        let order = most_uncertain(&[0.1, 0.45, 0.9, 0.5], 4, RenderSpace::Probability);
        assert_eq!(&order[..2], &[3, 1]);
        let tied = most_uncertain(&[0.25, 0.75, 0.75, 0.25], 4, RenderSpace::Probability);
        assert_eq!(tied, vec![0, 1, 2, 3]);
        assert_eq!(most_uncertain(&[0.2, 0.3, 0.4], 2, RenderSpace::Probability), vec![2, 1]);
    }

    #[test]
    fn upsample_constant_and_bounds() {
        let c = GridPrediction::constant(3, 3, 0.7);
        let up = upsample_x2(&c);
        assert_eq!((up.width, up.height), (6, 6));
        assert!(up.values.iter().all(|&v| v == 0.7));

        let g = GridPrediction::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_x2(&g);
        // new centers at 1/8, 3/8, 5/8, 7/8 -> pixel coords -0.25, 0.25, 0.75, 1.25
        let expect_row0 = [0.0, 0.25, 0.75, 1.0];
        let expect_row1 = [0.5, 0.75, 1.25, 1.5];
        assert_eq!(&up.values[0..4], &expect_row0);
        assert_eq!(&up.values[4..8], &expect_row1);
        assert_eq!(&up.values[12..16], &[2.0, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn config_validation() {
        assert_eq!(RenderConfig::default().steps().unwrap(), 3);
        assert_eq!(RenderConfig::default().eval_count().unwrap(), 3136);
        let bad = RenderConfig {
            target_res: 100,
            ..RenderConfig::default()
        };
        assert!(bad.steps().is_err());
        let bad = RenderConfig {
            target_res: 84,
            ..RenderConfig::default()
        };
        assert!(bad.steps().is_err());
        assert!(render(|_, _| 0.5, &bad, Exec::Sequential).is_err());
    }

    #[test]
    fn constant_function_counts() {
        let r = render(|_, _| 0.8, &RenderConfig::default(), Exec::Sequential).unwrap();
        assert_eq!(r.eval_count, 3136);
        assert_eq!((r.grid.width, r.grid.height), (224, 224));
        assert!(r.grid.values.iter().all(|&v| v == 0.8));
    }
}
