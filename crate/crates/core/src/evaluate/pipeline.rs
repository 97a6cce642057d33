//! Calibrate profiles on synthetic prompts, then evaluate every allocator on
//! a held-out prompt of the same model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rows::{
    decomposition_rows, recall_rows, recall_summary, report_rows, write_csv, CompareRow, DecompositionRow,
    HeadLossRow, LayerLossRow, RecallRow, RecallSummaryRow,
};
use super::{compare_solvers, evaluate_retained, EvalReport};
use crate::error::{Error, Result};
use crate::json;
use crate::loss::loss_curves;
use crate::metrics::{metric_ranking, score, MetricKind, MetricSpec};
use crate::oracle::{compute_oracle_importance, oracle_ranking, ImportanceTensor, Ranking};
use crate::profile::{
    aggregate_profile, apply_eviction, budget_from_ratios, budget_from_ratios_exact, default_grid, eviction_order,
    lookup_ratios, solve_ratio_grid_guarded, Safeguards,
};
use crate::shape::ModelShape;
use crate::solver::{
    baseline_allocate, convexify_all, greedy_allocate, AllocationDocument, Baseline, BudgetAllocation, SolverKind,
    ADAPTIVE_ALPHA, PYRAMID_BETA,
};
use crate::trace::{Scenario, SyntheticModel, TraceBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub shape: ModelShape,
    pub seed: u64,
    pub scenario: Scenario,
    pub metrics: Vec<MetricKind>,
    /// Calibration prompts per profile; prompt `M` is held out.
    pub calibration_queries: usize,
    pub grid: Vec<f64>,
    pub sigma_target: f64,
    /// Ratios for the recall and decomposition tables.
    pub report_sigmas: Vec<f64>,
    /// Ratios for the greedy-versus-DP table.
    pub compare_sigmas: Vec<f64>,
    pub pyramid_beta: f64,
    pub adaptive_alpha: f64,
    /// Hand the units lost to flooring back to heads when budgeting.
    pub exact_total: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            shape: ModelShape {
                num_layers: 4,
                num_heads: 8,
                prefill_len: 256,
                decode_len: 32,
                head_dim: 16,
            },
            seed: 42,
            scenario: Scenario::Misaligned,
            metrics: vec![MetricKind::Snapkv, MetricKind::Keydiff],
            calibration_queries: 30,
            grid: default_grid(),
            sigma_target: 0.8,
            report_sigmas: default_grid(),
            compare_sigmas: vec![0.0, 0.5, 0.8, 0.9],
            pyramid_beta: PYRAMID_BETA,
            adaptive_alpha: ADAPTIVE_ALPHA,
            exact_total: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics configured".into()));
        }
        if self.calibration_queries == 0 {
            return Err(Error::Config("at least one calibration query is needed".into()));
        }
        let ratios = self
            .report_sigmas
            .iter()
            .chain(&self.compare_sigmas)
            .chain(std::iter::once(&self.sigma_target));
        if let Some(s) = ratios.clone().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Config(format!("compression ratio {s} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let config: PipelineConfig = json::read(path)?;
        config.validate()?;
        Ok(config)
    }
}

/// Total held-out loss of one allocator under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: String,
    pub allocator: String,
    pub b_total: usize,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub heldout_query: u64,
    pub sigma_target: f64,
    pub entries: Vec<SummaryEntry>,
}

impl PipelineSummary {
    pub fn total_loss(&self, metric: &str, allocator: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.allocator == allocator)
            .map(|e| e.total_loss)
    }
}

#[derive(Default)]
struct Tables {
    layers: Vec<LayerLossRow>,
    heads: Vec<HeadLossRow>,
    recall: Vec<RecallRow>,
    recall_summary: Vec<RecallSummaryRow>,
    decomposition: Vec<DecompositionRow>,
    compare: Vec<CompareRow>,
    summary: Vec<SummaryEntry>,
}

impl Tables {
    fn add_report(&mut self, report: &EvalReport, metric: &str, allocator: &str) {
        let (layers, heads) = report_rows(report, metric, allocator);
        self.layers.extend(layers);
        self.heads.extend(heads);
        self.summary.push(SummaryEntry {
            metric: metric.into(),
            allocator: allocator.into(),
            b_total: report.budget_used(),
            total_loss: report.total_loss(),
        });
    }

    fn add_recall(&mut self, importance: &ImportanceTensor, ranking: &Ranking, metric: &str, sigmas: &[f64]) -> Result<()> {
        let rows = recall_rows(importance, ranking, metric, sigmas)?;
        self.recall_summary.extend(recall_summary(importance, &rows, sigmas));
        self.recall.extend(rows);
        Ok(())
    }
}

/// Runs calibration, profiling, budgeting and evaluation, writing every
/// artifact under `out`:
///
/// ```text
/// config.json  summary.json  profile_<metric>.json  allocation_<metric>_<allocator>.json
/// layer_loss.csv  head_loss.csv  recall.csv  recall_summary.csv  decomposition.csv  compare.csv
/// ```
pub fn run_pipeline(config: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    json::write(config, &out.join("config.json"))?;

    let model = SyntheticModel::new(config.shape, config.seed, config.scenario)?;
    let m = config.calibration_queries as u64;
    let calibration: Vec<TraceBundle> = (0..m).map(|q| model.trace(q)).collect();
    let heldout = model.trace(m);
    let importance = compute_oracle_importance(&heldout, true)?;
    let oracle = oracle_ranking(&importance);
    let (l, h, t) = (config.shape.num_layers, config.shape.num_heads, config.shape.prefill_len);

    let mut tables = Tables::default();
    tables.add_recall(&importance, &oracle, MetricKind::OraclePassthrough.as_str(), &config.report_sigmas)?;
    let oracle_recall = tables.recall.clone();

    for &kind in &config.metrics {
        let name = kind.as_str();
        let spec = MetricSpec::new(kind);
        let safeguards = Safeguards::for_metric(kind);
        safeguards.validate(t)?;

        let per_query = calibration
            .iter()
            .map(|trace| solve_ratio_grid_guarded(trace, &spec, &config.grid, &safeguards))
            .collect::<Result<Vec<_>>>()?;
        let profile = aggregate_profile(&per_query, name, safeguards, safeguards.max_compression)?;
        profile.write(&out.join(format!("profile_{name}.json")))?;

        let scores = score(&heldout, &spec)?;
        let ranking = metric_ranking(&scores)?;
        // curves along the order the safeguarded eviction admits tokens in
        let raw = loss_curves(&importance, &eviction_order(&ranking, &safeguards)?);
        let (convex, gains) = convexify_all(&raw)?;

        let ratios = lookup_ratios(&profile, config.sigma_target)?;
        let budgets = if config.exact_total {
            budget_from_ratios_exact(&ratios, t, &safeguards)?
        } else {
            budget_from_ratios(&ratios, t, &safeguards)?
        };
        let b_used: usize = budgets.iter().sum();

        // every other allocator spends the budget the profile actually used
        let mut allocations = vec![("lukv", BudgetAllocation::new(l, h, budgets, SolverKind::Profile)?)];
        allocations.push(("lukv_direct", greedy_allocate(&gains, b_used)?));
        for (label, kind) in [
            ("uniform", Baseline::Uniform),
            ("pyramid", Baseline::Pyramid { beta: config.pyramid_beta }),
            ("adaptive_topk", Baseline::AdaptiveTopk { alpha: config.adaptive_alpha }),
        ] {
            allocations.push((label, baseline_allocate(kind, l, h, t, Some(&scores), b_used)?));
        }

        // all allocators are scored under the same sink/window eviction rule
        for (label, alloc) in &allocations {
            let report = evaluate_retained(&importance, &apply_eviction(&ranking, alloc.budgets(), &safeguards)?)?;
            check_report(&report)?;
            tables.add_report(&report, name, label);
            AllocationDocument::new(alloc, name, Some(&raw), Some(&convex))
                .write(&out.join(format!("allocation_{name}_{label}.json")))?;
        }

        let before = tables.recall.len();
        tables.add_recall(&importance, &ranking, name, &config.report_sigmas)?;
        check_recall(&oracle_recall, &tables.recall[before..])?;

        let decomposition = decomposition_rows(&importance, &oracle, &ranking, name, &config.report_sigmas)?;
        if let Some(row) = decomposition.iter().find(|r| r.gap < 0.0) {
            return Err(Error::Invariant(format!(
                "negative optimality gap {} at head ({}, {}) budget {}",
                row.gap, row.layer, row.head, row.budget
            )));
        }
        tables.decomposition.extend(decomposition);

        for c in compare_solvers(&importance, &ranking, &config.compare_sigmas)? {
            if c.raw_gap() < -1e-9 {
                return Err(Error::Invariant(format!("greedy beat the exact DP at sigma {}", c.sigma)));
            }
            tables.compare.push(CompareRow::new(name, &c));
        }
    }

    write_csv(&out.join("layer_loss.csv"), &tables.layers)?;
    write_csv(&out.join("head_loss.csv"), &tables.heads)?;
    write_csv(&out.join("recall.csv"), &tables.recall)?;
    write_csv(&out.join("recall_summary.csv"), &tables.recall_summary)?;
    write_csv(&out.join("decomposition.csv"), &tables.decomposition)?;
    write_csv(&out.join("compare.csv"), &tables.compare)?;
    let summary = PipelineSummary {
        heldout_query: m,
        sigma_target: config.sigma_target,
        entries: tables.summary,
    };
    json::write(&summary, &out.join("summary.json"))?;
    Ok(summary)
}

fn check_report(report: &EvalReport) -> Result<()> {
    let h = report.num_heads();
    for (layer, &loss) in report.layer_loss().iter().enumerate() {
        let sum: f64 = report.head_loss()[layer * h..(layer + 1) * h].iter().sum();
        if (sum - loss).abs() > 1e-9 {
            return Err(Error::Invariant(format!("layer {layer} loss {loss} differs from its heads' sum {sum}")));
        }
    }
    let total: f64 = report.layer_loss().iter().sum();
    if (total - report.total_loss()).abs() > 1e-9 {
        return Err(Error::Invariant("total loss differs from the sum of layers".into()));
    }
    Ok(())
}

fn check_recall(oracle: &[RecallRow], metric: &[RecallRow]) -> Result<()> {
    for (o, r) in oracle.iter().zip(metric) {
        if r.recall > o.recall {
            return Err(Error::Invariant(format!(
                "{} recall {} exceeds the oracle's {} at head ({}, {}) sigma {}",
                r.metric, r.recall, o.recall, r.layer, r.head, r.sigma
            )));
        }
    }
    Ok(())
}
