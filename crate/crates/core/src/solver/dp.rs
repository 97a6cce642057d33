//! Exact multiple-choice knapsack over per-head budget levels.

use super::allocation::head_grid;
use super::{BudgetAllocation, SolverKind};
use crate::error::{Error, Result};
use crate::loss::LossCurve;

/// DP table over (heads processed, budget used), built once for every total
/// up to `max_budget`.
///
/// Minimizes `Σ L(b)` exactly; among equal optima the later head takes the
/// smallest budget.
pub struct MckpSolver {
    num_layers: usize,
    num_heads: usize,
    /// Best loss of all heads for each total, summed in head order.
    best: Vec<f64>,
    /// `choice[h * width + B]` is head `h`'s budget in the optimum over
    /// heads `0..=h` with total `B`.
    choice: Vec<u32>,
    width: usize,
    capacities: Vec<usize>,
    max_budget: usize,
}

impl MckpSolver {
    pub fn new(curves: &[LossCurve], max_budget: usize) -> Result<Self> {
        let (num_layers, num_heads) = head_grid(curves.iter().map(|c| c.head))?;
        let capacities: Vec<usize> = curves.iter().map(LossCurve::capacity).collect();
        let capacity: usize = capacities.iter().sum();
        if max_budget > capacity {
            return Err(Error::Infeasible {
                budget: max_budget,
                capacity,
            });
        }
        if max_budget > u32::MAX as usize {
            return Err(Error::Guardrail(format!("budget {max_budget} too large for the DP table")));
        }
        let width = max_budget + 1;
        let mut choice = vec![0u32; curves.len() * width];
        let mut prev = vec![f64::INFINITY; width];
        prev[0] = 0.0;
        let mut next = vec![f64::INFINITY; width];
        let mut reach = 0usize;
        for (h, curve) in curves.iter().enumerate() {
            let l = curve.values();
            let t = curve.capacity();
            let new_reach = (reach + t).min(max_budget);
            let row = &mut choice[h * width..(h + 1) * width];
            for total in 0..=new_reach {
                let lo = total.saturating_sub(reach);
                let hi = t.min(total);
                let mut best = f64::INFINITY;
                let mut arg = lo;
                for b in lo..=hi {
                    let v = prev[total - b] + l[b];
                    if v < best {
                        best = v;
                        arg = b;
                    }
                }
                next[total] = best;
                row[total] = arg as u32;
            }
            reach = new_reach;
            std::mem::swap(&mut prev, &mut next);
        }
        Ok(MckpSolver {
            num_layers,
            num_heads,
            best: prev,
            choice,
            width,
            capacities,
            max_budget,
        })
    }

    pub fn allocate(&self, b_total: usize) -> Result<BudgetAllocation> {
        if b_total > self.max_budget {
            return Err(Error::Infeasible {
                budget: b_total,
                capacity: self.max_budget,
            });
        }
        let mut budgets = vec![0usize; self.capacities.len()];
        let mut remaining = b_total;
        for h in (0..budgets.len()).rev() {
            let b = self.choice[h * self.width + remaining] as usize;
            budgets[h] = b;
            remaining -= b;
        }
        debug_assert_eq!(remaining, 0);
        Ok(BudgetAllocation::new(self.num_layers, self.num_heads, budgets, SolverKind::Dp)?
            .with_objective(self.best[b_total]))
    }
}

/// Exact minimizer of `Σ L(b)` subject to `Σ b = b_total`.
pub fn mckp_dp_allocate(curves: &[LossCurve], b_total: usize) -> Result<BudgetAllocation> {
    MckpSolver::new(curves, b_total)?.allocate(b_total)
}
