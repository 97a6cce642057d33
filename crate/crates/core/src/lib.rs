//! Head-level KV cache budget allocation driven by long-horizon token utility.
//!
//! The pipeline runs from attention traces to eviction decisions:
//!
//! 1. [`trace`] — trace bundles, their on-disk format and a synthetic generator.
//! 2. [`oracle`] — oracle importance of every cached token and its ranking.
//! 3. [`metrics`] — prefill-observable scoring rules that approximate it.
//! 4. [`loss`] — eviction-loss curves and the gap between a metric and the oracle.
//! 5. [`solver`] — convexification and the global budget allocators.
//! 6. [`profile`] — offline ratio profiles and online budgeting with safeguards.
//! 7. [`evaluate`] — loss reports, solver comparisons and the end-to-end pipeline.

pub mod error;
pub mod evaluate;
pub mod json;
pub mod loss;
pub mod metrics;
pub mod oracle;
pub mod profile;
pub mod selftest;
pub mod shape;
pub mod solver;
pub mod trace;

pub use error::{Error, Result};
pub use loss::{LossCurve, GapDecomposition, SetDecomposition};
pub use metrics::{MetricKind, MetricSpec};
pub use oracle::{ImportanceTensor, Normalization, Ranking};
pub use shape::{HeadIndex, HeadValues, ModelShape};
pub use solver::{BudgetAllocation, ConvexLossCurve, MarginalGains};
pub use trace::{Scenario, TraceBundle};

// The README and every guide chapter compile and run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/profiles.md")]
    mod profiles {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
