use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::allocation::head_grid;
use super::{BudgetAllocation, MarginalGains, SolverKind};
use crate::error::{Error, Result};

struct Candidate {
    gain: f64,
    head: usize,
}

impl Ord for Candidate {
    // larger gain first, then the lower head
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.head.cmp(&self.head))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Order in which greedy hands out budget units: the `n`-th entry is the head
/// that receives unit `n`. Allocations for every total are prefixes of it.
pub fn greedy_order(gains: &[MarginalGains], max_budget: usize) -> Result<Vec<usize>> {
    let capacity: usize = gains.iter().map(MarginalGains::capacity).sum();
    if max_budget > capacity {
        return Err(Error::Infeasible {
            budget: max_budget,
            capacity,
        });
    }
    let mut next = vec![0usize; gains.len()];
    let mut heap: BinaryHeap<Candidate> = gains
        .iter()
        .enumerate()
        .filter_map(|(head, g)| g.gains().first().map(|&gain| Candidate { gain, head }))
        .collect();
    let mut order = Vec::with_capacity(max_budget);
    while order.len() < max_budget {
        let Candidate { head, .. } = heap.pop().expect("capacity checked");
        order.push(head);
        next[head] += 1;
        if let Some(&gain) = gains[head].gains().get(next[head]) {
            heap.push(Candidate { gain, head });
        }
    }
    Ok(order)
}

/// Spends `b_total` units one at a time on the head with the largest next
/// gain. Ties go to the lower layer, then the lower head.
///
/// The objective is the relaxed loss `Σ L̆(b)`.
pub fn greedy_allocate(gains: &[MarginalGains], b_total: usize) -> Result<BudgetAllocation> {
    let (num_layers, num_heads) = head_grid(gains.iter().map(|g| g.head))?;
    let mut budgets = vec![0usize; gains.len()];
    for head in greedy_order(gains, b_total)? {
        budgets[head] += 1;
    }
    let objective = gains.iter().zip(&budgets).map(|(g, &b)| g.loss_at(b)).sum();
    Ok(BudgetAllocation::new(num_layers, num_heads, budgets, SolverKind::Greedy)?.with_objective(objective))
}
