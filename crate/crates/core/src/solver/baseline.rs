//! Reference allocators that ignore loss curves.

use serde::{Deserialize, Serialize};

use super::{BudgetAllocation, SolverKind};
use crate::error::{Error, Result};
use crate::oracle::Ranking;
use crate::shape::{HeadIndex, HeadValues};

pub const PYRAMID_BETA: f64 = 20.0;
pub const ADAPTIVE_ALPHA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    /// Same budget for every head.
    Uniform,
    /// Layer budgets on a linear ramp that shrinks with depth; the shallowest
    /// layer gets `2m - m/beta` and the deepest `m/beta`, where `m` is the
    /// mean layer budget.
    Pyramid { beta: f64 },
    /// Per-layer top-k over pooled metric scores, after reserving a fraction
    /// `alpha` of each head's even share.
    AdaptiveTopk { alpha: f64 },
}

impl Baseline {
    pub fn pyramid() -> Self {
        Baseline::Pyramid { beta: PYRAMID_BETA }
    }

    pub fn adaptive_topk() -> Self {
        Baseline::AdaptiveTopk { alpha: ADAPTIVE_ALPHA }
    }

    pub fn solver_kind(&self) -> SolverKind {
        match self {
            Baseline::Uniform => SolverKind::Uniform,
            Baseline::Pyramid { .. } => SolverKind::Pyramid,
            Baseline::AdaptiveTopk { .. } => SolverKind::AdaptiveTopk,
        }
    }
}

/// Splits `total` into `parts` near-equal shares, the first ones larger.
fn even_split(total: usize, parts: usize) -> Vec<usize> {
    let (q, r) = (total / parts, total % parts);
    (0..parts).map(|i| q + usize::from(i < r)).collect()
}

/// Allocates `b_total` among `num_layers x num_heads` heads of `len` tokens.
/// `scores` are the per-token metric scores; only the adaptive allocator
/// reads them.
pub fn baseline_allocate(
    kind: Baseline,
    num_layers: usize,
    num_heads: usize,
    len: usize,
    scores: Option<&HeadValues>,
    b_total: usize,
) -> Result<BudgetAllocation> {
    let capacity = num_layers * num_heads * len;
    if b_total > capacity {
        return Err(Error::Infeasible {
            budget: b_total,
            capacity,
        });
    }
    if num_layers == 0 || num_heads == 0 {
        return BudgetAllocation::new(num_layers, num_heads, Vec::new(), kind.solver_kind());
    }
    let budgets = match kind {
        // b_total <= capacity, so no share exceeds len
        Baseline::Uniform => even_split(b_total, num_layers * num_heads),
        Baseline::Pyramid { beta } => {
            if !(beta.is_finite() && beta >= 1.0) {
                return Err(Error::Config(format!("pyramid beta {beta} must be at least 1")));
            }
            pyramid_layers(num_layers, num_heads * len, b_total, beta)
                .into_iter()
                .flat_map(|lb| even_split(lb, num_heads))
                .collect()
        }
        Baseline::AdaptiveTopk { alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("adaptive alpha {alpha} outside [0, 1]")));
            }
            let scores = scores.ok_or_else(|| Error::Config("adaptive allocation needs metric scores".into()))?;
            if (scores.num_layers(), scores.num_heads(), scores.len()) != (num_layers, num_heads, len) {
                return Err(Error::ShapeMismatch("metric scores do not match the head grid".into()));
            }
            adaptive(scores, b_total, alpha)?
        }
    };
    BudgetAllocation::new(num_layers, num_heads, budgets, kind.solver_kind())
}

/// Layer budgets on the pyramid ramp, floored, with the remainder handed to
/// the shallowest layers and any overflow beyond a layer's capacity pushed to
/// the next layers that have room.
pub fn pyramid_layers(num_layers: usize, layer_capacity: usize, b_total: usize, beta: f64) -> Vec<usize> {
    let mean = b_total as f64 / num_layers as f64;
    let low = mean / beta;
    let high = 2.0 * mean - low;
    let target = |l: usize| {
        if num_layers == 1 {
            mean
        } else {
            high - (high - low) * l as f64 / (num_layers - 1) as f64
        }
    };
    let mut layers: Vec<usize> = (0..num_layers).map(|l| target(l).max(0.0).floor() as usize).collect();
    // floors only lose mass; trim from the deepest layers in case rounding
    // in the ramp pushed a floor over
    let mut excess = layers.iter().sum::<usize>().saturating_sub(b_total);
    for lb in layers.iter_mut().rev() {
        let cut = excess.min(*lb);
        *lb -= cut;
        excess -= cut;
    }
    let assigned: usize = layers.iter().sum();
    for i in 0..b_total - assigned {
        layers[i % num_layers] += 1;
    }
    let mut overflow = 0usize;
    for lb in layers.iter_mut() {
        *lb += overflow;
        overflow = lb.saturating_sub(layer_capacity);
        *lb -= overflow;
    }
    for lb in layers.iter_mut() {
        let add = overflow.min(layer_capacity - *lb);
        *lb += add;
        overflow -= add;
    }
    layers
}

fn adaptive(scores: &HeadValues, b_total: usize, alpha: f64) -> Result<Vec<usize>> {
    let (num_layers, num_heads, len) = (scores.num_layers(), scores.num_heads(), scores.len());
    let ranking = Ranking::from_scores(scores)?;
    let mut budgets = Vec::with_capacity(num_layers * num_heads);
    for (layer, lb) in even_split(b_total, num_layers).into_iter().enumerate() {
        let share = lb as f64 / num_heads as f64;
        let reserve = ((alpha * share).floor() as usize).min(len);
        let mut heads = vec![reserve; num_heads];
        let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(num_heads * len);
        for h in 0..num_heads {
            let head = HeadIndex::new(layer, h);
            let values = scores.head(head);
            for (rank, &pos) in ranking.head(head).iter().enumerate().skip(reserve) {
                pool.push((values[pos], h, rank));
            }
        }
        pool.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let rest = lb - reserve * num_heads;
        for &(_, h, _) in pool.iter().take(rest) {
            heads[h] += 1;
        }
        budgets.extend(heads);
    }
    Ok(budgets)
}
