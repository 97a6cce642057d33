use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::loss::LossCurve;
use crate::shape::HeadIndex;
use crate::solver::ConvexLossCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Greedy,
    Dp,
    Brute,
    Uniform,
    Pyramid,
    AdaptiveTopk,
    /// Budgets produced from a stored profile.
    Profile,
}

impl SolverKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::Greedy => "greedy",
            SolverKind::Dp => "dp",
            SolverKind::Brute => "brute",
            SolverKind::Uniform => "uniform",
            SolverKind::Pyramid => "pyramid",
            SolverKind::AdaptiveTopk => "adaptive_topk",
            SolverKind::Profile => "profile",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "greedy" => SolverKind::Greedy,
            "dp" => SolverKind::Dp,
            "brute" => SolverKind::Brute,
            "uniform" => SolverKind::Uniform,
            "pyramid" => SolverKind::Pyramid,
            "adaptive" | "adaptive_topk" => SolverKind::AdaptiveTopk,
            "profile" => SolverKind::Profile,
            other => return Err(Error::Config(format!("unknown solver `{other}`"))),
        })
    }
}

/// Integer budgets per head, layer-major, with their total.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetAllocation {
    num_layers: usize,
    num_heads: usize,
    budgets: Vec<usize>,
    total: usize,
    /// Objective the solver minimized, if it minimized one.
    pub objective: Option<f64>,
    pub solver: SolverKind,
}

impl BudgetAllocation {
    pub fn new(num_layers: usize, num_heads: usize, budgets: Vec<usize>, solver: SolverKind) -> Result<Self> {
        if budgets.len() != num_layers * num_heads {
            return Err(Error::ShapeMismatch(format!(
                "{} budgets for {num_layers}x{num_heads} heads",
                budgets.len()
            )));
        }
        Ok(BudgetAllocation {
            num_layers,
            num_heads,
            total: budgets.iter().sum(),
            budgets,
            objective: None,
            solver,
        })
    }

    pub(crate) fn with_objective(mut self, objective: f64) -> Self {
        self.objective = Some(objective);
        self
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    pub fn budget(&self, head: HeadIndex) -> usize {
        self.budgets[head.layer * self.num_heads + head.head]
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn to_matrix(&self) -> Vec<Vec<usize>> {
        self.budgets
            .chunks(self.num_heads.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// `Σ L(b)` over the given per-head curves, summed in head order.
    pub fn loss_on(&self, curves: &[LossCurve]) -> f64 {
        self.budgets.iter().zip(curves).map(|(&b, c)| c.at(b)).sum()
    }

    pub fn relaxed_loss_on(&self, curves: &[ConvexLossCurve]) -> f64 {
        self.budgets.iter().zip(curves).map(|(&b, c)| c.at(b)).sum()
    }
}

/// The `allocation.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDocument {
    pub schema_version: u32,
    pub metric: String,
    #[serde(rename = "B_total")]
    pub b_total: usize,
    pub solver: SolverKind,
    pub budgets: Vec<Vec<usize>>,
    pub relaxed_objective: Option<f64>,
    pub raw_objective: Option<f64>,
}

impl AllocationDocument {
    /// Describes `allocation`, evaluating both objectives on the curves when given.
    pub fn new(
        allocation: &BudgetAllocation,
        metric: &str,
        raw: Option<&[LossCurve]>,
        convex: Option<&[ConvexLossCurve]>,
    ) -> Self {
        AllocationDocument {
            schema_version: 1,
            metric: metric.to_string(),
            b_total: allocation.total(),
            solver: allocation.solver,
            budgets: allocation.to_matrix(),
            relaxed_objective: convex.map(|c| allocation.relaxed_loss_on(c)),
            raw_objective: raw.map(|c| allocation.loss_on(c)),
        }
    }

    pub fn to_allocation(&self) -> Result<BudgetAllocation> {
        let num_layers = self.budgets.len();
        let num_heads = self.budgets.first().map_or(0, Vec::len);
        if self.budgets.iter().any(|row| row.len() != num_heads) {
            return Err(Error::ShapeMismatch("ragged budget matrix".into()));
        }
        let alloc = BudgetAllocation::new(num_layers, num_heads, self.budgets.concat(), self.solver)?;
        if alloc.total() != self.b_total {
            return Err(Error::Invariant(format!(
                "budgets sum to {} but B_total is {}",
                alloc.total(),
                self.b_total
            )));
        }
        Ok(alloc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        json::write(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        json::read(path)
    }
}

/// Layer and head counts of a layer-major list of heads.
pub(crate) fn head_grid(heads: impl ExactSizeIterator<Item = HeadIndex>) -> Result<(usize, usize)> {
    let heads: Vec<HeadIndex> = heads.collect();
    let Some(last) = heads.last() else {
        return Ok((0, 0));
    };
    let (num_layers, num_heads) = (last.layer + 1, last.head + 1);
    let ordered = heads.len() == num_layers * num_heads
        && heads
            .iter()
            .enumerate()
            .all(|(i, h)| h.layer == i / num_heads && h.head == i % num_heads);
    if ordered {
        Ok((num_layers, num_heads))
    } else {
        Err(Error::ShapeMismatch("heads must cover an L x H grid in layer-major order".into()))
    }
}
