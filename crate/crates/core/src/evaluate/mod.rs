//! Loss reports per head and layer, solver comparisons, and the end-to-end
//! pipeline that ties profiling and evaluation together.

mod pipeline;
mod rows;

pub use pipeline::{run_pipeline, PipelineConfig, PipelineSummary, SummaryEntry};
pub use rows::{
    decomposition_rows, recall_rows, recall_summary, report_rows, write_csv, CompareRow, DecompositionRow,
    HeadLossRow, LayerLossRow, RecallRow, RecallSummaryRow,
};

use crate::error::{Error, Result};
use crate::loss::{eviction_loss, loss_curves};
use crate::oracle::{ImportanceTensor, Ranking};
use crate::shape::{floor_fraction, HeadIndex};
use crate::solver::{convexify_all, greedy_allocate, BudgetAllocation, MckpSolver};

/// Largest `heads x tokens x budget` product the comparison DP will attempt.
pub const DP_WORK_LIMIT: u128 = 20_000_000_000;

/// Eviction loss of every head, summed per layer and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    num_layers: usize,
    num_heads: usize,
    budgets: Vec<usize>,
    head_loss: Vec<f64>,
    layer_loss: Vec<f64>,
    total_loss: f64,
}

impl EvalReport {
    fn from_heads(num_layers: usize, num_heads: usize, budgets: Vec<usize>, head_loss: Vec<f64>) -> Self {
        let layer_loss: Vec<f64> = head_loss
            .chunks(num_heads.max(1))
            .map(|layer| layer.iter().sum())
            .collect();
        let total_loss = layer_loss.iter().sum();
        EvalReport {
            num_layers,
            num_heads,
            budgets,
            head_loss,
            layer_loss,
            total_loss,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Retained tokens per head, layer-major.
    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    /// Loss per head, layer-major.
    pub fn head_loss(&self) -> &[f64] {
        &self.head_loss
    }

    pub fn layer_loss(&self) -> &[f64] {
        &self.layer_loss
    }

    pub fn total_loss(&self) -> f64 {
        self.total_loss
    }

    pub fn budget_used(&self) -> usize {
        self.budgets.iter().sum()
    }
}

fn check_grid(importance: &ImportanceTensor, num_layers: usize, num_heads: usize) -> Result<()> {
    if (importance.num_layers(), importance.num_heads()) != (num_layers, num_heads) {
        return Err(Error::ShapeMismatch(format!(
            "{num_layers}x{num_heads} heads against a {}x{} trace",
            importance.num_layers(),
            importance.num_heads()
        )));
    }
    Ok(())
}

/// Each head keeps the first `b` positions of its ranking.
pub fn evaluate_allocation(
    importance: &ImportanceTensor,
    ranking: &Ranking,
    allocation: &BudgetAllocation,
) -> Result<EvalReport> {
    let (l, h) = (allocation.num_layers(), allocation.num_heads());
    check_grid(importance, l, h)?;
    if (ranking.num_layers(), ranking.num_heads(), ranking.len()) != (l, h, importance.len()) {
        return Err(Error::ShapeMismatch("ranking does not match the importance tensor".into()));
    }
    let t = importance.len();
    let mut losses = Vec::with_capacity(l * h);
    for (flat, &b) in allocation.budgets().iter().enumerate() {
        if b > t {
            return Err(Error::Infeasible { budget: b, capacity: t });
        }
        let head = HeadIndex::new(flat / h, flat % h);
        losses.push(eviction_loss(importance, head, ranking.prefix(head, b))?);
    }
    Ok(EvalReport::from_heads(l, h, allocation.budgets().to_vec(), losses))
}

/// Each head keeps exactly the given positions.
pub fn evaluate_retained(importance: &ImportanceTensor, retained: &[Vec<usize>]) -> Result<EvalReport> {
    let (l, h) = (importance.num_layers(), importance.num_heads());
    if retained.len() != l * h {
        return Err(Error::ShapeMismatch(format!("{} retained sets for {} heads", retained.len(), l * h)));
    }
    let mut losses = Vec::with_capacity(l * h);
    for (flat, set) in retained.iter().enumerate() {
        losses.push(eviction_loss(importance, HeadIndex::new(flat / h, flat % h), set)?);
    }
    Ok(EvalReport::from_heads(l, h, retained.iter().map(Vec::len).collect(), losses))
}

/// Objectives of the relaxed and exact solvers at one global ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverComparison {
    pub sigma: f64,
    pub b_total: usize,
    /// `Σ L̆(b)` of the greedy allocation.
    pub greedy_relaxed: f64,
    /// Exact optimum of `Σ L̆(b)`.
    pub dp_convex: f64,
    /// Exact optimum of `Σ L(b)`.
    pub dp_raw: f64,
    /// `Σ L(b)` of the greedy allocation.
    pub greedy_raw: f64,
}

impl SolverComparison {
    /// Extra raw loss of the greedy allocation over the exact optimum.
    pub fn raw_gap(&self) -> f64 {
        self.greedy_raw - self.dp_raw
    }
}

/// Greedy against the exact DP at each ratio in `sigmas`, with budgets
/// `floor((1 - σ) L H T)`. Fails if greedy misses the relaxed optimum by more
/// than `1e-9`.
pub fn compare_solvers(importance: &ImportanceTensor, ranking: &Ranking, sigmas: &[f64]) -> Result<Vec<SolverComparison>> {
    if let Some(s) = sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Config(format!("compression ratio {s} outside [0, 1]")));
    }
    let raw = loss_curves(importance, ranking);
    let (convex, gains) = convexify_all(&raw)?;
    let capacity = raw.len() * importance.len();
    let totals: Vec<usize> = sigmas.iter().map(|&s| floor_fraction(1.0 - s, capacity)).collect();
    let max_budget = totals.iter().copied().max().unwrap_or(0);
    let work = raw.len() as u128 * importance.len() as u128 * max_budget as u128;
    if work > DP_WORK_LIMIT {
        return Err(Error::Guardrail(format!(
            "DP over {} heads of {} tokens up to budget {max_budget}",
            raw.len(),
            importance.len()
        )));
    }
    let convex_curves: Vec<_> = convex.iter().map(|c| c.as_curve()).collect();
    let dp_convex = MckpSolver::new(&convex_curves, max_budget)?;
    let dp_raw = MckpSolver::new(&raw, max_budget)?;
    sigmas
        .iter()
        .zip(&totals)
        .map(|(&sigma, &b_total)| {
            let greedy = greedy_allocate(&gains, b_total)?;
            let row = SolverComparison {
                sigma,
                b_total,
                greedy_relaxed: greedy.relaxed_loss_on(&convex),
                dp_convex: dp_convex.allocate(b_total)?.loss_on(&convex_curves),
                dp_raw: dp_raw.allocate(b_total)?.loss_on(&raw),
                greedy_raw: greedy.loss_on(&raw),
            };
            if (row.greedy_relaxed - row.dp_convex).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "greedy relaxed objective {} differs from the convex DP optimum {} at sigma {sigma}",
                    row.greedy_relaxed, row.dp_convex
                )));
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossCurve;
    use crate::oracle::oracle_ranking;
    use crate::solver::SolverKind;

    fn two_heads() -> (ImportanceTensor, Ranking) {
        // oracle curves [9,4,1,0] and [7,3,1,0]
        let imp = ImportanceTensor::from_heads(&[vec![vec![5.0, 3.0, 1.0], vec![4.0, 2.0, 1.0]]]).unwrap();
        let rank = oracle_ranking(&imp);
        (imp, rank)
    }

    #[test]
    fn full_and_empty_budgets() {
        let (imp, rank) = two_heads();
        let full = BudgetAllocation::new(1, 2, vec![3, 3], SolverKind::Uniform).unwrap();
        assert_eq!(evaluate_allocation(&imp, &rank, &full).unwrap().total_loss(), 0.0);
        let none = BudgetAllocation::new(1, 2, vec![0, 0], SolverKind::Uniform).unwrap();
        let r = evaluate_allocation(&imp, &rank, &none).unwrap();
        assert_eq!(r.total_loss(), 16.0);
        assert_eq!(r.layer_loss(), &[16.0]);
    }

    #[test]
    fn solver_instance_loss() {
        let curves = vec![
            LossCurve::from_values(HeadIndex::new(0, 0), vec![10.0, 9.0, 2.0, 2.0]).unwrap(),
            LossCurve::from_values(HeadIndex::new(0, 1), vec![8.0, 4.0, 3.0, 0.0]).unwrap(),
        ];
        let alloc = BudgetAllocation::new(1, 2, vec![2, 1], SolverKind::Dp).unwrap();
        assert_eq!(alloc.loss_on(&curves), 6.0);

        // the same curves less the first head's floor of 2, realized by
        // importances [1,7,0] and [4,1,3] in position order
        let imp = ImportanceTensor::from_heads(&[vec![vec![1.0, 7.0, 0.0], vec![4.0, 1.0, 3.0]]]).unwrap();
        let rank = Ranking::from_orders(1, 2, vec![vec![0, 1, 2], vec![0, 1, 2]]).unwrap();
        let r = evaluate_allocation(&imp, &rank, &alloc).unwrap();
        assert_eq!(r.head_loss(), &[0.0, 4.0]);
        assert_eq!(r.total_loss(), 4.0);
    }

    #[test]
    fn comparison_columns() {
        let (imp, rank) = two_heads();
        let rows = compare_solvers(&imp, &rank, &[0.0, 0.5, 1.0]).unwrap();
        // oracle curves are convex, so all four objectives agree
        for row in &rows {
            assert_eq!(row.greedy_relaxed, row.dp_convex);
            assert_eq!(row.dp_raw, row.greedy_raw);
            assert_eq!(row.dp_raw, row.dp_convex);
        }
        assert_eq!(rows[0].dp_raw, 0.0);
        assert_eq!(rows[1].b_total, 3);
        assert_eq!(rows[1].greedy_raw, 4.0);
        assert_eq!(rows[2].dp_raw, 16.0);
    }

    #[test]
    fn retained_sets() {
        let (imp, _) = two_heads();
        let r = evaluate_retained(&imp, &[vec![0], vec![0, 2]]).unwrap();
        assert_eq!(r.head_loss(), &[4.0, 2.0]);
        assert_eq!(r.budgets(), &[1, 2]);
    }
}
