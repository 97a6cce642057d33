use super::allocation::head_grid;
use super::{BudgetAllocation, SolverKind};
use crate::error::{Error, Result};
use crate::loss::LossCurve;

pub const BRUTE_MAX_HEADS: usize = 5;
pub const BRUTE_MAX_TOKENS: usize = 12;

/// Enumerates every allocation; small instances only.
///
/// Losses are summed in head order and the first optimum in lexicographic
/// order of the budget vector wins.
pub fn brute_force_allocate(curves: &[LossCurve], b_total: usize) -> Result<BudgetAllocation> {
    if curves.len() > BRUTE_MAX_HEADS || curves.iter().any(|c| c.capacity() > BRUTE_MAX_TOKENS) {
        return Err(Error::Guardrail(format!(
            "brute force handles at most {BRUTE_MAX_HEADS} heads of {BRUTE_MAX_TOKENS} tokens"
        )));
    }
    let (num_layers, num_heads) = head_grid(curves.iter().map(|c| c.head))?;
    let capacity: usize = curves.iter().map(LossCurve::capacity).sum();
    if b_total > capacity {
        return Err(Error::Infeasible {
            budget: b_total,
            capacity,
        });
    }
    let mut current = vec![0usize; curves.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    search(curves, 0, b_total, &mut current, &mut best);
    let (loss, budgets) = best.expect("feasible budget has an allocation");
    Ok(BudgetAllocation::new(num_layers, num_heads, budgets, SolverKind::Brute)?.with_objective(loss))
}

fn search(
    curves: &[LossCurve],
    head: usize,
    remaining: usize,
    current: &mut [usize],
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if head == curves.len() {
        if remaining == 0 {
            let loss = current.iter().zip(curves).fold(0.0, |acc, (&b, c)| acc + c.at(b));
            if best.as_ref().is_none_or(|(l, _)| loss < *l) {
                *best = Some((loss, current.to_vec()));
            }
        }
        return;
    }
    for b in 0..=remaining.min(curves[head].capacity()) {
        current[head] = b;
        search(curves, head + 1, remaining - b, current, best);
    }
}
