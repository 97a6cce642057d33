//! CSV row types and their builders.

use std::path::Path;

use serde::Serialize;

use super::{EvalReport, SolverComparison};
use crate::error::{Error, Result};
use crate::loss::{decompose, recall_curve, sum_descending};
use crate::oracle::{ImportanceTensor, Ranking};
use crate::shape::{floor_fraction, HeadIndex};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLossRow {
    pub metric: String,
    pub allocator: String,
    pub layer: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadLossRow {
    pub metric: String,
    pub allocator: String,
    pub layer: usize,
    pub head: usize,
    pub budget: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallRow {
    pub layer: usize,
    pub head: usize,
    pub metric: String,
    pub sigma: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallSummaryRow {
    pub metric: String,
    pub sigma: f64,
    /// Plain mean over heads.
    pub mean_recall: f64,
    /// Mean over heads weighted by each head's importance mass.
    pub mass_weighted_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub metric: String,
    pub layer: usize,
    pub head: usize,
    pub budget: usize,
    pub heuristic_loss: f64,
    pub oracle_loss: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub metric: String,
    pub sigma: f64,
    pub b_total: usize,
    pub greedy_relaxed: f64,
    pub dp_convex: f64,
    pub dp_raw: f64,
    pub greedy_raw: f64,
    pub raw_gap: f64,
}

impl CompareRow {
    pub fn new(metric: &str, c: &SolverComparison) -> Self {
        CompareRow {
            metric: metric.to_string(),
            sigma: c.sigma,
            b_total: c.b_total,
            greedy_relaxed: c.greedy_relaxed,
            dp_convex: c.dp_convex,
            dp_raw: c.dp_raw,
            greedy_raw: c.greedy_raw,
            raw_gap: c.raw_gap(),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        writer.serialize(row).map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn heads(importance: &ImportanceTensor) -> impl Iterator<Item = HeadIndex> {
    let (l, h) = (importance.num_layers(), importance.num_heads());
    (0..l).flat_map(move |layer| (0..h).map(move |head| HeadIndex::new(layer, head)))
}

pub fn report_rows(report: &EvalReport, metric: &str, allocator: &str) -> (Vec<LayerLossRow>, Vec<HeadLossRow>) {
    let layers = report
        .layer_loss()
        .iter()
        .enumerate()
        .map(|(layer, &loss)| LayerLossRow {
            metric: metric.into(),
            allocator: allocator.into(),
            layer,
            loss,
        })
        .collect();
    let h = report.num_heads();
    let heads = report
        .head_loss()
        .iter()
        .zip(report.budgets())
        .enumerate()
        .map(|(flat, (&loss, &budget))| HeadLossRow {
            metric: metric.into(),
            allocator: allocator.into(),
            layer: flat / h,
            head: flat % h,
            budget,
            loss,
        })
        .collect();
    (layers, heads)
}

pub fn recall_rows(importance: &ImportanceTensor, ranking: &Ranking, metric: &str, sigmas: &[f64]) -> Result<Vec<RecallRow>> {
    let mut rows = Vec::new();
    for head in heads(importance) {
        for (&sigma, recall) in sigmas.iter().zip(recall_curve(importance, head, ranking, sigmas)?) {
            rows.push(RecallRow {
                layer: head.layer,
                head: head.head,
                metric: metric.into(),
                sigma,
                recall,
            });
        }
    }
    Ok(rows)
}

/// Both across-head aggregates of per-head recall rows of one metric.
pub fn recall_summary(importance: &ImportanceTensor, rows: &[RecallRow], sigmas: &[f64]) -> Vec<RecallSummaryRow> {
    let Some(metric) = rows.first().map(|r| r.metric.clone()) else {
        return Vec::new();
    };
    let mass: Vec<f64> = heads(importance)
        .map(|h| sum_descending(importance.head(h).iter().copied()))
        .collect();
    let total_mass: f64 = mass.iter().sum();
    let h = importance.num_heads();
    sigmas
        .iter()
        .map(|&sigma| {
            let per_head: Vec<&RecallRow> = rows.iter().filter(|r| r.sigma == sigma).collect();
            let mean = per_head.iter().map(|r| r.recall).sum::<f64>() / per_head.len().max(1) as f64;
            let weighted = if total_mass > 0.0 {
                per_head
                    .iter()
                    .map(|r| r.recall * mass[r.layer * h + r.head])
                    .sum::<f64>()
                    / total_mass
            } else {
                1.0
            };
            RecallSummaryRow {
                metric: metric.clone(),
                sigma,
                mean_recall: mean,
                mass_weighted_recall: weighted,
            }
        })
        .collect()
}

/// Decomposition of the metric's loss at the per-head budget
/// `floor((1 - σ) T)` for each `σ`.
pub fn decomposition_rows(
    importance: &ImportanceTensor,
    oracle: &Ranking,
    ranking: &Ranking,
    metric: &str,
    sigmas: &[f64],
) -> Result<Vec<DecompositionRow>> {
    let t = importance.len();
    let mut rows = Vec::new();
    for head in heads(importance) {
        for &sigma in sigmas {
            let budget = floor_fraction(1.0 - sigma, t);
            let (_, gap) = decompose(importance, head, oracle, ranking, budget)?;
            rows.push(DecompositionRow {
                metric: metric.into(),
                layer: head.layer,
                head: head.head,
                budget,
                heuristic_loss: gap.heuristic_loss,
                oracle_loss: gap.oracle_loss,
                gap: gap.optimality_gap,
            });
        }
    }
    Ok(rows)
}
