use std::path::PathBuf;

use anyhow::Result;
use clap::ValueEnum;
use pointsup::budget::{
    annotation_time, break_even_interval, dataset_time, per_instance_time, tradeoff_curve, BreakEven, BudgetParams,
    DataFractions, SupervisionKind, TradeoffPoint, COCO_TRAIN2017_INSTANCES,
};
use serde::Serialize;

use crate::emit;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = COCO_TRAIN2017_INSTANCES)]
    instances: u64,
    #[arg(long, default_value_t = 10)]
    points: usize,
    #[arg(long, default_value_t = 28.8)]
    t_category: f64,
    #[arg(long, default_value_t = 14.4)]
    t_spotting: f64,
    #[arg(long, default_value_t = 7.0)]
    t_box: f64,
    #[arg(long, default_value_t = 0.9)]
    t_point: f64,
    #[arg(long, default_value_t = 79.2)]
    t_mask: f64,
    /// Add the stage-time interval where points are cheapest.
    #[arg(long)]
    break_even: bool,
    #[arg(long, default_value_t = 1.0)]
    f_box: f64,
    #[arg(long, default_value_t = 0.4)]
    f_mask: f64,
    #[arg(long, default_value_t = 0.5)]
    f_point: f64,
    /// Comma-separated data fractions for a cost/fraction table.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct KindRow {
    kind: String,
    annotation_s: f64,
    per_instance_s: f64,
    days: f64,
}

#[derive(Serialize)]
struct TradeoffRow {
    kind: String,
    #[serde(flatten)]
    point: TradeoffPoint,
}

#[derive(Serialize)]
struct Report {
    params: BudgetParams,
    instances: u64,
    kinds: Vec<KindRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    break_even: Option<BreakEvenReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tradeoff: Vec<TradeoffRow>,
}

#[derive(Serialize)]
struct BreakEvenReport {
    fractions: DataFractions,
    n_points: usize,
    low: f64,
    /// `null` when unbounded.
    high: Option<f64>,
    empty: bool,
}

fn break_even_report(iv: BreakEven, fractions: DataFractions, n_points: usize) -> BreakEvenReport {
    BreakEvenReport {
        fractions,
        n_points,
        low: iv.low,
        high: iv.high.is_finite().then_some(iv.high),
        empty: iv.is_empty(),
    }
}

pub fn run(a: Args) -> Result<()> {
    let params = BudgetParams {
        t_category: a.t_category,
        t_spotting: a.t_spotting,
        t_box: a.t_box,
        t_point: a.t_point,
        t_mask: a.t_mask,
    };
    params.validate()?;
    let kinds = [SupervisionKind::Box, SupervisionKind::Mask, SupervisionKind::Points(a.points)];
    let rows: Vec<KindRow> = kinds
        .iter()
        .map(|&k| KindRow {
            kind: k.to_string(),
            annotation_s: annotation_time(k, &params),
            per_instance_s: per_instance_time(k, &params, true),
            days: dataset_time(k, a.instances, &params),
        })
        .collect();
    let fractions = DataFractions {
        boxes: a.f_box,
        masks: a.f_mask,
        points: a.f_point,
    };
    let break_even = if a.break_even {
        Some(break_even_report(break_even_interval(fractions, &params, a.points)?, fractions, a.points))
    } else {
        None
    };
    let mut tradeoff = Vec::new();
    if !a.fractions.is_empty() {
        for k in kinds {
            for point in tradeoff_curve(k, &a.fractions, &params, a.instances)? {
                tradeoff.push(TradeoffRow { kind: k.to_string(), point });
            }
        }
    }
    let report = Report {
        params,
        instances: a.instances,
        kinds: rows,
        break_even,
        tradeoff,
    };
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&report)?,
        Format::Csv => to_csv(&report)?,
    };
    emit(a.out.as_ref(), &text)
}

/// Single table; the `section` column tells the parts apart.
fn to_csv(r: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["section", "kind", "fraction", "annotation_s", "per_instance_s", "days", "low_s", "high_s"])?;
    for k in &r.kinds {
        w.write_record([
            "per_instance",
            &k.kind,
            "1",
            &k.annotation_s.to_string(),
            &k.per_instance_s.to_string(),
            &k.days.to_string(),
            "",
            "",
        ])?;
    }
    for t in &r.tradeoff {
        w.write_record([
            "tradeoff",
            &t.kind,
            &t.point.fraction.to_string(),
            "",
            "",
            &t.point.annotation_days.to_string(),
            "",
            "",
        ])?;
    }
    if let Some(b) = &r.break_even {
        w.write_record([
            "break_even",
            &format!("P{}", b.n_points),
            "",
            "",
            "",
            "",
            &b.low.to_string(),
            &b.high.map_or("inf".to_string(), |h| h.to_string()),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
