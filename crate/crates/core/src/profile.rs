//! Offline compression profiles and their online use.
//!
//! Offline, each calibration trace is solved at every global ratio `ρ` of a
//! grid and the optimal per-head ratios `r = 1 - b/T` are averaged over the
//! traces. Online, the profile is looked up at the target ratio, turned into
//! integer budgets with safeguards, and each head keeps its sinks, its recent
//! window and the best-ranked remaining tokens.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::loss::{loss_curves, LossCurve};
use crate::metrics::{metric_ranking, score, MetricKind, MetricSpec};
use crate::oracle::{compute_oracle_importance, Ranking};
use crate::shape::{ceil_fraction, floor_fraction, HeadIndex, HeadValues};
use crate::solver::{convexify_all, greedy_order};
use crate::trace::TraceBundle;

pub const DEFAULT_SINK: usize = 4;
pub const DEFAULT_MAX_COMPRESSION: f64 = 0.99;
const SCHEMA_VERSION: u32 = 1;

/// The default calibration grid: 0.1 to 0.9 in steps of 0.1, then 0.95 and 0.99.
pub fn default_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    grid.extend([0.95, 0.99]);
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Safeguards {
    /// Leading positions every head keeps.
    #[serde(rename = "sink")]
    pub sink_size: usize,
    /// Trailing positions every head keeps.
    #[serde(rename = "window")]
    pub recent_window: usize,
    /// Largest local compression ratio; `1 - max_compression` is also the
    /// minimum fraction of tokens a head retains.
    pub max_compression: f64,
}

impl Safeguards {
    pub fn for_metric(kind: MetricKind) -> Self {
        Safeguards {
            sink_size: DEFAULT_SINK,
            recent_window: kind.default_recent_window(),
            max_compression: DEFAULT_MAX_COMPRESSION,
        }
    }

    /// No sinks, no window and no compression cap.
    pub fn disabled() -> Self {
        Safeguards {
            sink_size: 0,
            recent_window: 0,
            max_compression: 1.0,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.max_compression > 0.0 && self.max_compression <= 1.0) {
            return Err(Error::Config(format!(
                "max_compression {} outside (0, 1]",
                self.max_compression
            )));
        }
        if self.sink_size + self.recent_window > len {
            return Err(Error::Config(format!(
                "sink {} + window {} exceed {len} tokens",
                self.sink_size, self.recent_window
            )));
        }
        Ok(())
    }

    /// Smallest budget a head of `len` tokens may receive.
    pub fn min_budget(&self, len: usize) -> usize {
        (self.sink_size + self.recent_window)
            .max(ceil_fraction(1.0 - self.max_compression, len))
            .min(len)
    }
}

/// Optimal local ratios of one trace at each global ratio of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioGrid {
    grid: Vec<f64>,
    /// `[L, H, grid]`
    ratios: HeadValues,
}

impl RatioGrid {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn ratios(&self) -> &HeadValues {
        &self.ratios
    }

    /// Local ratios of every head at grid point `g`, layer-major.
    pub fn at(&self, g: usize) -> Vec<f64> {
        self.ratios.iter_heads().map(|(_, r)| r[g]).collect()
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty ratio grid".into()));
    }
    if let Some(r) = grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::Config(format!("grid ratio {r} outside [0, 1]")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Solves one calibration trace over `grid`: intra-layer normalized oracle
/// importance, ordered by the metric's ranking, convexified and allocated
/// greedily at `B = floor((1 - ρ) L H T)`.
pub fn solve_ratio_grid(trace: &TraceBundle, metric: &MetricSpec, grid: &[f64]) -> Result<RatioGrid> {
    solve_ratio_grid_guarded(trace, metric, grid, &Safeguards::disabled())
}

/// [`solve_ratio_grid`] with curves taken along the safeguarded
/// [`eviction_order`], so that the profile is fitted to the retained sets the
/// safeguards will actually produce.
pub fn solve_ratio_grid_guarded(
    trace: &TraceBundle,
    metric: &MetricSpec,
    grid: &[f64],
    safeguards: &Safeguards,
) -> Result<RatioGrid> {
    let importance = compute_oracle_importance(trace, true)?;
    let ranking = eviction_order(&metric_ranking(&score(trace, metric)?)?, safeguards)?;
    solve_ratio_grid_from_curves(&loss_curves(&importance, &ranking), grid)
}

/// [`solve_ratio_grid`] on precomputed raw loss curves of equal length.
pub fn solve_ratio_grid_from_curves(curves: &[LossCurve], grid: &[f64]) -> Result<RatioGrid> {
    check_grid(grid)?;
    let last = curves.last().ok_or_else(|| Error::Config("no loss curves".into()))?;
    let (num_layers, num_heads) = (last.head.layer + 1, last.head.head + 1);
    let len = last.capacity();
    if curves.iter().any(|c| c.capacity() != len) {
        return Err(Error::ShapeMismatch("loss curves differ in length".into()));
    }
    let (_, gains) = convexify_all(curves)?;
    let capacity = curves.len() * len;
    let totals: Vec<usize> = grid.iter().map(|&rho| floor_fraction(1.0 - rho, capacity)).collect();
    // greedy allocations nest, so one pass serves every grid point
    let order = greedy_order(&gains, totals.iter().copied().max().unwrap_or(0))?;
    let mut ratios = HeadValues::zeros(num_layers, num_heads, grid.len());
    if ratios.as_slice().len() != curves.len() * grid.len() {
        return Err(Error::ShapeMismatch("heads must cover an L x H grid".into()));
    }
    for (g, &total) in totals.iter().enumerate() {
        let mut budgets = vec![0usize; curves.len()];
        for &h in &order[..total] {
            budgets[h] += 1;
        }
        for (flat, &b) in budgets.iter().enumerate() {
            let head = HeadIndex::new(flat / num_heads, flat % num_heads);
            ratios.head_mut(head)[g] = 1.0 - b as f64 / len as f64;
        }
    }
    Ok(RatioGrid {
        grid: grid.to_vec(),
        ratios,
    })
}

/// Static lookup table from a global ratio to per-head local ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    schema_version: u32,
    metric: String,
    #[serde(rename = "L")]
    num_layers: usize,
    #[serde(rename = "H")]
    num_heads: usize,
    grid: Vec<f64>,
    /// `[L][H][grid]`
    ratios: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "M")]
    queries: usize,
    r_cap: f64,
    safeguards: Safeguards,
}

impl Profile {
    pub fn metric(&self) -> &str {
        &self.metric
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Stored ratios of one head along the grid.
    pub fn head_ratios(&self, head: HeadIndex) -> &[f64] {
        &self.ratios[head.layer][head.head]
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn r_cap(&self) -> f64 {
        self.r_cap
    }

    pub fn safeguards(&self) -> &Safeguards {
        &self.safeguards
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported profile schema_version {}",
                self.schema_version
            )));
        }
        check_grid(&self.grid)?;
        if !(0.0..=1.0).contains(&self.r_cap) {
            return Err(Error::Config(format!("r_cap {} outside [0, 1]", self.r_cap)));
        }
        let shaped = self.ratios.len() == self.num_layers
            && self.ratios.iter().all(|l| {
                l.len() == self.num_heads && l.iter().all(|h| h.len() == self.grid.len())
            });
        if !shaped {
            return Err(Error::ShapeMismatch("profile ratios do not match L, H and grid".into()));
        }
        for head in self.ratios.iter().flatten() {
            if head.iter().any(|r| !(0.0..=self.r_cap).contains(r)) {
                return Err(Error::Invariant("profile ratio outside [0, r_cap]".into()));
            }
            if head.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::Invariant("profile ratios decrease along the grid".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: Profile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed profile: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        json::write(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let profile: Profile = json::read(path)?;
        profile.validate()?;
        Ok(profile)
    }
}

/// Averages per-query ratios, clamps them to `[0, r_cap]` and makes each
/// head's ratios non-decreasing along the grid.
pub fn aggregate_profile(
    per_query: &[RatioGrid],
    metric: &str,
    safeguards: Safeguards,
    r_cap: f64,
) -> Result<Profile> {
    let first = per_query.first().ok_or(Error::EmptyProfile)?;
    if !(0.0..=1.0).contains(&r_cap) {
        return Err(Error::Config(format!("r_cap {r_cap} outside [0, 1]")));
    }
    let (l, h, g) = (
        first.ratios.num_layers(),
        first.ratios.num_heads(),
        first.grid.len(),
    );
    for q in per_query {
        if q.grid != first.grid {
            return Err(Error::ShapeMismatch("calibration grids differ".into()));
        }
        if (q.ratios.num_layers(), q.ratios.num_heads()) != (l, h) {
            return Err(Error::ShapeMismatch("calibration head grids differ".into()));
        }
    }
    let m = per_query.len() as f64;
    let ratios = (0..l)
        .map(|layer| {
            (0..h)
                .map(|head| {
                    let head = HeadIndex::new(layer, head);
                    let means: Vec<f64> = (0..g)
                        .map(|i| {
                            // summing in sorted order makes the mean independent
                            // of query order
                            let mut v: Vec<f64> = per_query.iter().map(|q| q.ratios.head(head)[i]).collect();
                            v.sort_by(f64::total_cmp);
                            (v.iter().sum::<f64>() / m).clamp(0.0, r_cap)
                        })
                        .collect();
                    isotonic_increasing(&means)
                })
                .collect()
        })
        .collect();
    Ok(Profile {
        schema_version: SCHEMA_VERSION,
        metric: metric.to_string(),
        num_layers: l,
        num_heads: h,
        grid: first.grid.clone(),
        ratios,
        queries: per_query.len(),
        r_cap,
        safeguards,
    })
}

/// Least-squares projection onto non-decreasing sequences.
pub fn isotonic_increasing(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        let mut block = (v, 1usize);
        while let Some(&(s, n)) = blocks.last() {
            if s / n as f64 > block.0 / block.1 as f64 {
                block = (s + block.0, n + block.1);
                blocks.pop();
            } else {
                break;
            }
        }
        blocks.push(block);
    }
    blocks
        .into_iter()
        .flat_map(|(s, n)| std::iter::repeat_n(s / n as f64, n))
        .collect()
}

/// Per-head local ratios at `sigma`, layer-major: stored values on grid
/// points, linear interpolation between them, nearest endpoint outside.
pub fn lookup_ratios(profile: &Profile, sigma: f64) -> Result<Vec<f64>> {
    if profile.grid.is_empty() {
        return Err(Error::EmptyProfile);
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Config(format!("target ratio {sigma} outside [0, 1]")));
    }
    let grid = &profile.grid;
    let heads = profile.ratios.iter().flatten();
    let at = |i: usize| heads.clone().map(|r| r[i]).collect::<Vec<f64>>();
    if sigma <= grid[0] {
        return Ok(at(0));
    }
    if sigma >= grid[grid.len() - 1] {
        return Ok(at(grid.len() - 1));
    }
    if let Some(i) = grid.iter().position(|&g| g == sigma) {
        return Ok(at(i));
    }
    let hi = grid.partition_point(|&g| g < sigma);
    let lo = hi - 1;
    let w = (sigma - grid[lo]) / (grid[hi] - grid[lo]);
    Ok(heads.map(|r| r[lo] + w * (r[hi] - r[lo])).collect())
}

fn clamped_shares(ratios: &[f64], len: usize, safeguards: &Safeguards) -> Result<Vec<f64>> {
    safeguards.validate(len)?;
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("local ratio {r} outside [0, 1]")));
            }
            Ok(1.0 - r.min(safeguards.max_compression))
        })
        .collect()
}

/// Integer budgets `b = floor((1 - r) T)` after capping `r` at
/// `max_compression`, raised to the safeguard minimum.
pub fn budget_from_ratios(ratios: &[f64], len: usize, safeguards: &Safeguards) -> Result<Vec<usize>> {
    let floor = safeguards.min_budget(len);
    Ok(clamped_shares(ratios, len, safeguards)?
        .into_iter()
        .map(|keep| floor_fraction(keep, len).max(floor))
        .collect())
}

/// Like [`budget_from_ratios`], but the units lost to flooring are handed back
/// one per head, largest fractional part first, so that the total before
/// safeguards equals `floor(Σ (1 - r) T)`.
pub fn budget_from_ratios_exact(ratios: &[f64], len: usize, safeguards: &Safeguards) -> Result<Vec<usize>> {
    let shares = clamped_shares(ratios, len, safeguards)?;
    let mut budgets: Vec<usize> = shares.iter().map(|&keep| floor_fraction(keep, len)).collect();
    let exact: f64 = shares.iter().map(|&keep| keep * len as f64).sum();
    let nearest = exact.round();
    let target = if (exact - nearest).abs() <= 1e-9 * exact.max(1.0) {
        nearest
    } else {
        exact.floor()
    } as usize;
    let mut order: Vec<usize> = (0..budgets.len()).collect();
    let frac = |i: usize| shares[i] * len as f64 - budgets[i] as f64;
    let fracs: Vec<f64> = order.iter().map(|&i| frac(i)).collect();
    order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(budgets.iter().sum());
    for &i in &order {
        if missing == 0 {
            break;
        }
        if budgets[i] < len {
            budgets[i] += 1;
            missing -= 1;
        }
    }
    let floor = safeguards.min_budget(len);
    Ok(budgets.into_iter().map(|b| b.max(floor)).collect())
}

/// The order in which a head admits tokens under the safeguards: sinks, then
/// the recent window from the newest token back, then the remaining positions
/// in ranking order. Its length-`b` prefix is the retained set at budget `b`.
pub fn eviction_order(ranking: &Ranking, safeguards: &Safeguards) -> Result<Ranking> {
    let len = ranking.len();
    safeguards.validate(len)?;
    let (l, h) = (ranking.num_layers(), ranking.num_heads());
    let orders = (0..l * h)
        .map(|flat| {
            let mut seen = vec![false; len];
            let mut order = Vec::with_capacity(len);
            let sinks = 0..safeguards.sink_size;
            let recent = (len - safeguards.recent_window..len).rev();
            let ranked = ranking.head(HeadIndex::new(flat / h, flat % h)).iter().copied();
            for p in sinks.chain(recent).chain(ranked) {
                if !std::mem::replace(&mut seen[p], true) {
                    order.push(p);
                }
            }
            order
        })
        .collect();
    Ranking::from_orders(l, h, orders)
}

/// Retained positions per head (sorted): the sinks, the recent window, then
/// the best-ranked remaining positions until the head's budget is filled.
///
/// A budget too small for all sink and window positions keeps sinks first,
/// then the most recent tokens.
pub fn apply_eviction(ranking: &Ranking, budgets: &[usize], safeguards: &Safeguards) -> Result<Vec<Vec<usize>>> {
    let len = ranking.len();
    let heads = ranking.num_layers() * ranking.num_heads();
    if budgets.len() != heads {
        return Err(Error::ShapeMismatch(format!("{} budgets for {heads} heads", budgets.len())));
    }
    let order = eviction_order(ranking, safeguards)?;
    budgets
        .iter()
        .enumerate()
        .map(|(flat, &b)| {
            if b > len {
                return Err(Error::Infeasible {
                    budget: b,
                    capacity: len,
                });
            }
            let head = HeadIndex::new(flat / ranking.num_heads(), flat % ranking.num_heads());
            let mut kept = order.prefix(head, b).to_vec();
            kept.sort_unstable();
            Ok(kept)
        })
        .collect()
}
