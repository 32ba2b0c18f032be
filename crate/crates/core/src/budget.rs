//! Annotation-time arithmetic for box, mask and point supervision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Instances in COCO train2017.
pub const COCO_TRAIN2017_INSTANCES: u64 = 849_949;

/// Per-instance stage timings in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetParams {
    pub t_category: f64,
    pub t_spotting: f64,
    pub t_box: f64,
    pub t_point: f64,
    pub t_mask: f64,
}

impl Default for BudgetParams {
    /// COCO timings: 7,000 h category labeling and 3,500 h spotting over
    /// 849,949 instances, 7 s extreme-point boxes, 0.9 s per point, 79.2 s
    /// polygon masks.
    fn default() -> Self {
        Self {
            t_category: 28.8,
            t_spotting: 14.4,
            t_box: 7.0,
            t_point: 0.9,
            t_mask: 79.2,
        }
    }
}

impl BudgetParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.t_category, self.t_spotting, self.t_box, self.t_point, self.t_mask];
        if all.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(invalid(format!("timings must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Category labeling plus instance spotting.
    pub fn stage_time(&self) -> f64 {
        self.t_category + self.t_spotting
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "points", rename_all = "snake_case")]
pub enum SupervisionKind {
    Box,
    Mask,
    /// Box plus `N` labeled points.
    Points(usize),
}

impl fmt::Display for SupervisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupervisionKind::Box => write!(f, "B"),
            SupervisionKind::Mask => write!(f, "M"),
            SupervisionKind::Points(n) => write!(f, "P{n}"),
        }
    }
}

/// Seconds to annotate one instance, excluding any per-instance stage time.
pub fn annotation_time(kind: SupervisionKind, params: &BudgetParams) -> f64 {
    match kind {
        SupervisionKind::Box => params.t_box,
        SupervisionKind::Mask => params.t_mask,
        SupervisionKind::Points(n) => params.t_box + n as f64 * params.t_point,
    }
}

pub fn per_instance_time(kind: SupervisionKind, params: &BudgetParams, include_stages: bool) -> f64 {
    let stages = if include_stages { params.stage_time() } else { 0.0 };
    stages + annotation_time(kind, params)
}

/// Days for `n_instances`, stages included.
pub fn dataset_time(kind: SupervisionKind, n_instances: u64, params: &BudgetParams) -> f64 {
    n_instances as f64 * per_instance_time(kind, params, true) / SECONDS_PER_DAY
}

/// Range of stage time `t` (seconds per instance) over which point
/// supervision is the cheapest way to reach a fixed quality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    /// Lower end, clamped at 0.
    pub low: f64,
    /// Upper end; `f64::INFINITY` when points beat masks for every `t`.
    pub high: f64,
}

impl BreakEven {
    pub fn is_empty(&self) -> bool {
        !(self.high > self.low)
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.low && t < self.high
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFractions {
    pub boxes: f64,
    pub masks: f64,
    pub points: f64,
}

/// Solves `f_p (t + t_box + N t_point) < f_b (t + t_box)` and
/// `f_p (t + t_box + N t_point) < f_m (t + t_mask)` for `t >= 0`.
///
/// A comparison whose two cost lines coincide has no strict solution and is
/// reported as an error.
pub fn break_even_interval(fractions: DataFractions, params: &BudgetParams, n_points: usize) -> Result<BreakEven> {
    params.validate()?;
    for f in [fractions.boxes, fractions.masks, fractions.points] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(invalid(format!("data fraction {f} outside (0, 1]")));
        }
    }
    let point_cost = params.t_box + n_points as f64 * params.t_point;
    let mut iv = BreakEven {
        low: 0.0,
        high: f64::INFINITY,
    };
    for (label, f_other, cost_other) in [("box", fractions.boxes, params.t_box), ("mask", fractions.masks, params.t_mask)] {
        // (f_p - f_o) t < f_o c_o - f_p c_p
        let slope = fractions.points - f_other;
        let rhs = f_other * cost_other - fractions.points * point_cost;
        if slope == 0.0 {
            if rhs == 0.0 {
                return Err(invalid(format!("point and {label} cost lines coincide")));
            }
            if rhs < 0.0 {
                iv.high = iv.high.min(0.0);
            }
        } else if slope > 0.0 {
            iv.high = iv.high.min(rhs / slope);
        } else {
            iv.low = iv.low.max(rhs / slope);
        }
    }
    Ok(iv)
}

/// Total days for a supervision kind at stage time `t` when only `fraction`
/// of the instances need annotating.
pub fn total_days_at_stage_time(kind: SupervisionKind, t: f64, fraction: f64, n_instances: u64, params: &BudgetParams) -> f64 {
    fraction * n_instances as f64 * (t + annotation_time(kind, params)) / SECONDS_PER_DAY
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub fraction: f64,
    pub annotation_days: f64,
}

/// Annotation days for each data fraction (stages included).
pub fn tradeoff_curve(kind: SupervisionKind, fractions: &[f64], params: &BudgetParams, n_instances: u64) -> Result<Vec<TradeoffPoint>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(invalid("fractions must lie in (0, 1]"));
    }
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("fractions must be sorted ascending"));
    }
    let full = dataset_time(kind, n_instances, params);
    Ok(fractions
        .iter()
        .map(|&f| TradeoffPoint {
            fraction: f,
            annotation_days: f * full,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn per_instance_examples() {
        let p = BudgetParams::default();
        assert!(close(per_instance_time(SupervisionKind::Points(10), &p, true), 59.2));
        assert!(close(per_instance_time(SupervisionKind::Mask, &p, true), 122.4));
        assert!(close(per_instance_time(SupervisionKind::Box, &p, true), 50.2));
        assert!(close(per_instance_time(SupervisionKind::Points(10), &p, false), 16.0));
        assert!(close(per_instance_time(SupervisionKind::Points(0), &p, false), 7.0));
    }

    #[test]
    fn affine_in_points() {
        let p = BudgetParams::default();
        for n in 0..50 {
            let d = per_instance_time(SupervisionKind::Points(n + 1), &p, true) - per_instance_time(SupervisionKind::Points(n), &p, true);
            assert!((d - p.t_point).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_days() {
        let p = BudgetParams::default();
        assert_eq!(dataset_time(SupervisionKind::Box, 0, &p), 0.0);
        let b = dataset_time(SupervisionKind::Box, COCO_TRAIN2017_INSTANCES, &p);
        let m = dataset_time(SupervisionKind::Mask, COCO_TRAIN2017_INSTANCES, &p);
        let pt = dataset_time(SupervisionKind::Points(10), COCO_TRAIN2017_INSTANCES, &p);
        assert!((b - 493.0).abs() <= 1.0, "{b}");
        assert!((m - 1204.0).abs() <= 1.0, "{m}");
        assert!((pt - 582.0).abs() <= 1.0, "{pt}");
    }

    #[test]
    fn break_even_examples() {
        let p = BudgetParams::default();
        let f = DataFractions {
            boxes: 1.0,
            masks: 0.4,
            points: 0.5,
        };
        let iv = break_even_interval(f, &p, 10).unwrap();
        assert!(close(iv.low, 2.0), "{iv:?}");
        assert!(close(iv.high, 236.8), "{iv:?}");

        // equal fractions, cheaper points: never worse than masks
        let f2 = DataFractions { masks: 0.5, ..f };
        assert_eq!(break_even_interval(f2, &p, 10).unwrap().high, f64::INFINITY);

        let free_points = BudgetParams { t_point: 0.0, ..p };
        assert_eq!(break_even_interval(f, &free_points, 10).unwrap().low, 0.0);

        // points at the same fraction and cost as boxes: coincident lines
        let f3 = DataFractions { boxes: 0.5, ..f };
        assert!(break_even_interval(f3, &p, 0).is_err());
        assert!(break_even_interval(DataFractions { points: 0.0, ..f }, &p, 10).is_err());
    }

    #[test]
    fn tradeoff_examples() {
        let p = BudgetParams::default();
        let c = tradeoff_curve(SupervisionKind::Mask, &[0.5, 1.0], &p, COCO_TRAIN2017_INSTANCES).unwrap();
        assert!((c[1].annotation_days - 1204.0).abs() <= 1.0);
        assert!(close(c[0].annotation_days * 2.0, c[1].annotation_days));
        let pts = tradeoff_curve(SupervisionKind::Points(10), &[1.0], &p, COCO_TRAIN2017_INSTANCES).unwrap();
        assert!(pts[0].annotation_days < c[0].annotation_days);
        assert!(tradeoff_curve(SupervisionKind::Mask, &[1.0, 0.5], &p, 10).is_err());
    }
}
