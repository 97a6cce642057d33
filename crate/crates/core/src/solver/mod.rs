//! Global head-level budget allocation.
//!
//! Raw loss curves are generally not convex, so the separable problem
//! `min Σ L(b)` subject to `Σ b = B` is solved two ways: greedily on the
//! convex surrogates, where greedy is optimal, and exactly on the raw curves
//! with a multiple-choice knapsack DP.

mod allocation;
mod baseline;
mod brute;
mod convex;
mod dp;
mod greedy;

pub use allocation::{AllocationDocument, BudgetAllocation, SolverKind};
pub use baseline::{baseline_allocate, pyramid_layers, Baseline, ADAPTIVE_ALPHA, PYRAMID_BETA};
pub use brute::{brute_force_allocate, BRUTE_MAX_HEADS, BRUTE_MAX_TOKENS};
pub use convex::{marginal_gains, pava_convexify, ConvexLossCurve, MarginalGains};
pub use dp::{mckp_dp_allocate, MckpSolver};
pub use greedy::{greedy_allocate, greedy_order};

use crate::error::Result;
use crate::loss::LossCurve;

/// Convex surrogates and their gains for a set of raw curves.
pub fn convexify_all(curves: &[LossCurve]) -> Result<(Vec<ConvexLossCurve>, Vec<MarginalGains>)> {
    let convex = curves.iter().map(pava_convexify).collect::<Result<Vec<_>>>()?;
    let gains = convex.iter().map(marginal_gains).collect();
    Ok((convex, gains))
}
