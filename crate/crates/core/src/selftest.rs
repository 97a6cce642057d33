//! Invariant suite runnable from the command line.
//!
//! Each check draws seeded random instances and compares the library against
//! an independent reference: a lower convex hull for the surrogate, exhaustive
//! search for the exact solver, direct set arithmetic for the decomposition.

use std::fs;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{decompose, loss_curves, recall_curve, second_differences, LossCurve};
use crate::metrics::{metric_ranking, score, MetricKind, MetricSpec};
use crate::oracle::{compute_oracle_importance, oracle_ranking, Ranking};
use crate::profile::{aggregate_profile, apply_eviction, default_grid, solve_ratio_grid, Profile, Safeguards};
use crate::shape::{HeadIndex, ModelShape};
use crate::solver::{
    baseline_allocate, brute_force_allocate, convexify_all, greedy_allocate, mckp_dp_allocate, pava_convexify,
    Baseline, MckpSolver,
};
use crate::trace::{generate_synthetic_trace, load_trace, save_trace, Scenario};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// First failure, if any.
    pub detail: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

struct Check {
    name: &'static str,
    cases: usize,
    failures: usize,
    detail: Option<String>,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Check {
            name,
            cases: 0,
            failures: 0,
            detail: None,
        }
    }

    fn expect(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            self.detail.get_or_insert_with(detail);
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            detail: self.detail,
        }
    }
}

/// Runs every check; single-threaded and deterministic.
pub fn run_selftest() -> SelftestReport {
    let start = Instant::now();
    let checks = vec![
        convex_minorant(),
        relaxed_optimality(),
        exact_optimum(),
        decomposition_identity(),
        recall_ordering(),
        witness_identity(),
        budget_conservation(),
        greedy_nesting(),
        safeguards(),
        serialization(),
    ];
    SelftestReport {
        checks,
        elapsed: start.elapsed(),
    }
}

fn rng(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5e1f_7e57 ^ stream)
}

/// A curve from random importances in a random order; heavy-tailed so that
/// ties, zeros and large inversions all occur.
fn random_curve(rng: &mut ChaCha8Rng, head: HeadIndex, len: usize) -> LossCurve {
    let values: Vec<f64> = (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random::<f64>().powi(3) * 10.0
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    LossCurve::from_ranked(head, &values, &order)
}

fn random_heads(rng: &mut ChaCha8Rng, heads: usize, len: usize) -> Vec<LossCurve> {
    (0..heads).map(|h| random_curve(rng, HeadIndex::new(0, h), len)).collect()
}

/// Lower convex hull of `(i, v[i])`, evaluated at every integer `i`.
fn lower_hull(v: &[f64]) -> Vec<f64> {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..v.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // drop b unless it lies strictly below segment a -> i
            let cross = (b - a) as f64 * (v[i] - v[a]) - (i - a) as f64 * (v[b] - v[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = vec![0.0; v.len()];
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(b + 1).skip(a) {
            *o = v[a] + (v[b] - v[a]) * (i - a) as f64 / (b - a) as f64;
        }
    }
    if v.len() == 1 {
        out[0] = v[0];
    }
    out
}

fn convex_minorant() -> CheckOutcome {
    let mut check = Check::new("surrogate equals the lower convex hull");
    let mut rng = rng(1);
    for _ in 0..300 {
        let len = rng.random_range(1..=64);
        let curve = random_curve(&mut rng, HeadIndex::new(0, 0), len);
        let surrogate = pava_convexify(&curve).expect("valid curve");
        let hull = lower_hull(curve.values());
        let s = surrogate.values();
        let worst = s.iter().zip(&hull).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let convex = s.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= -1e-12);
        let below = s.iter().zip(curve.values()).all(|(a, b)| *a <= b + 1e-12);
        let ends = s[0] == curve.at(0) && s[len] == curve.at(len);
        check.expect(worst <= 1e-9 && convex && below && ends, || {
            format!("T={len}: max deviation {worst:e}, convex {convex}, below {below}, endpoints {ends}")
        });
    }
    check.finish()
}

fn relaxed_optimality() -> CheckOutcome {
    let mut check = Check::new("greedy attains the relaxed optimum");
    let mut rng = rng(2);
    for _ in 0..40 {
        let heads = rng.random_range(1..=16);
        let len = rng.random_range(1..=48);
        let curves = random_heads(&mut rng, heads, len);
        let (convex, gains) = convexify_all(&curves).expect("valid curves");
        let surrogate: Vec<LossCurve> = convex.iter().map(|c| c.as_curve()).collect();
        let dp = MckpSolver::new(&surrogate, heads * len).expect("feasible");
        for _ in 0..3 {
            let b = rng.random_range(0..=heads * len);
            let greedy = greedy_allocate(&gains, b).expect("feasible").relaxed_loss_on(&convex);
            let exact = dp.allocate(b).expect("feasible").loss_on(&surrogate);
            check.expect((greedy - exact).abs() <= 1e-9, || {
                format!("{heads} heads, T={len}, B={b}: greedy {greedy} vs DP {exact}")
            });
        }
    }
    check.finish()
}

fn exact_optimum() -> CheckOutcome {
    let mut check = Check::new("exact DP matches exhaustive search");
    let mut rng = rng(3);
    for _ in 0..60 {
        let heads = rng.random_range(1..=4);
        let len = rng.random_range(1..=8);
        let curves = random_heads(&mut rng, heads, len);
        let (_, gains) = convexify_all(&curves).expect("valid curves");
        let all_convex = curves
            .iter()
            .all(|c| c.values().windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= 0.0));
        for b in 0..=heads * len {
            let dp = mckp_dp_allocate(&curves, b).expect("feasible");
            let brute = brute_force_allocate(&curves, b).expect("small instance");
            let gap = greedy_allocate(&gains, b).expect("feasible").loss_on(&curves) - dp.loss_on(&curves);
            let tight = !all_convex || gap.abs() <= 1e-9;
            check.expect(dp.objective == brute.objective && gap >= -1e-12 && tight, || {
                format!(
                    "{heads} heads, T={len}, B={b}: DP {:?} brute {:?} greedy gap {gap}",
                    dp.objective, brute.objective
                )
            });
        }
    }
    check.finish()
}

fn bundle(seed: u64, scenario: Scenario) -> crate::trace::TraceBundle {
    let shape = ModelShape::new(2, 4, 64, 8, 16).expect("valid shape");
    generate_synthetic_trace(shape, seed, scenario).expect("valid shape")
}

fn decomposition_identity() -> CheckOutcome {
    let mut check = Check::new("heuristic loss = oracle loss + gap, gap >= 0");
    let mut rng = rng(4);
    for seed in 0..4 {
        let trace = bundle(seed, Scenario::Mixed);
        let imp = compute_oracle_importance(&trace, seed % 2 == 0).expect("valid trace");
        let oracle = oracle_ranking(&imp);
        for spec in [MetricSpec::snapkv(), MetricSpec::keydiff()] {
            let ranking = metric_ranking(&score(&trace, &spec).expect("metric inputs")).expect("finite scores");
            for _ in 0..50 {
                let head = HeadIndex::new(rng.random_range(0..2), rng.random_range(0..4));
                let b = rng.random_range(0..=64);
                let (sets, gap) = decompose(&imp, head, &oracle, &ranking, b).expect("valid budget");
                let values = imp.head(head);
                let outside = |keep: &[usize]| -> f64 {
                    (0..values.len()).filter(|j| !keep.contains(j)).map(|j| values[j]).sum()
                };
                let direct_gap: f64 = sets.misses.iter().map(|&j| values[j]).sum::<f64>()
                    - sets.false_positives.iter().map(|&j| values[j]).sum::<f64>();
                let residual = gap.heuristic_loss - gap.oracle_loss - gap.optimality_gap;
                let scale = gap.heuristic_loss.abs().max(f64::MIN_POSITIVE);
                let consistent = (outside(ranking.prefix(head, b)) - gap.heuristic_loss).abs() <= 1e-12 * scale.max(1.0)
                    && (direct_gap - gap.optimality_gap).abs() <= 1e-12 * scale.max(1.0);
                check.expect(residual.abs() <= 1e-12 * scale && gap.optimality_gap >= 0.0 && consistent, || {
                    format!("head {head:?} b={b}: residual {residual:e}, gap {}", gap.optimality_gap)
                });
            }
        }
    }
    check.finish()
}

fn recall_ordering() -> CheckOutcome {
    let mut check = Check::new("oracle recall dominates metric recall");
    let sigmas = default_grid();
    for seed in 0..5 {
        let trace = bundle(seed, Scenario::Misaligned);
        let imp = compute_oracle_importance(&trace, true).expect("valid trace");
        let oracle = oracle_ranking(&imp);
        for spec in [MetricSpec::snapkv(), MetricSpec::keydiff()] {
            let ranking = metric_ranking(&score(&trace, &spec).expect("metric inputs")).expect("finite scores");
            for head in trace.shape().heads() {
                let o = recall_curve(&imp, head, &oracle, &sigmas).expect("valid ratios");
                let m = recall_curve(&imp, head, &ranking, &sigmas).expect("valid ratios");
                check.expect(o.iter().zip(&m).all(|(a, b)| a >= b), || {
                    format!("seed {seed}, {:?}, head {head:?}", spec.kind)
                });
            }
        }
    }
    check.finish()
}

fn witness_identity() -> CheckOutcome {
    let mut check = Check::new("second differences match increments; misaligned bundles bend");
    for seed in 0..5 {
        let trace = bundle(seed, Scenario::Misaligned);
        let imp = compute_oracle_importance(&trace, false).expect("valid trace");
        let ranking = metric_ranking(&score(&trace, &MetricSpec::snapkv()).expect("metric inputs")).expect("finite");
        let mut negative = false;
        let mut identity = true;
        for head in trace.shape().heads() {
            for d in second_differences(&imp, head, &ranking) {
                identity &= (d.value - d.increment_form).abs() <= 1e-12;
                negative |= d.increment_form < 0.0;
            }
        }
        check.expect(identity && negative, || format!("seed {seed}: identity {identity}, witness {negative}"));
    }
    check.finish()
}

fn budget_conservation() -> CheckOutcome {
    let mut check = Check::new("every allocator spends exactly B within [0, T]");
    let trace = bundle(9, Scenario::Mixed);
    let shape = *trace.shape();
    let imp = compute_oracle_importance(&trace, true).expect("valid trace");
    let scores = score(&trace, &MetricSpec::snapkv()).expect("metric inputs");
    let ranking: Ranking = metric_ranking(&scores).expect("finite scores");
    let curves = loss_curves(&imp, &ranking);
    let (_, gains) = convexify_all(&curves).expect("valid curves");
    let (l, h, t) = (shape.num_layers, shape.num_heads, shape.prefill_len);
    let dp = MckpSolver::new(&curves, l * h * t).expect("feasible");
    for b in (0..=l * h * t).step_by(37).chain([l * h * t]) {
        let allocations = [
            greedy_allocate(&gains, b),
            dp.allocate(b),
            baseline_allocate(Baseline::Uniform, l, h, t, None, b),
            baseline_allocate(Baseline::pyramid(), l, h, t, None, b),
            baseline_allocate(Baseline::adaptive_topk(), l, h, t, Some(&scores), b),
        ];
        for a in allocations {
            let a = a.expect("feasible");
            let ok = a.total() == b && a.budgets().iter().sum::<usize>() == b && a.budgets().iter().all(|&x| x <= t);
            check.expect(ok, || format!("{} at B={b}: {:?}", a.solver, a.budgets()));
        }
    }
    check.finish()
}

fn greedy_nesting() -> CheckOutcome {
    let mut check = Check::new("greedy allocations nest as B grows");
    let mut rng = rng(8);
    for _ in 0..20 {
        let heads = rng.random_range(1..=8);
        let len = rng.random_range(1..=32);
        let curves = random_heads(&mut rng, heads, len);
        let (_, gains) = convexify_all(&curves).expect("valid curves");
        let mut prev = greedy_allocate(&gains, 0).expect("feasible");
        for b in 1..=heads * len {
            let next = greedy_allocate(&gains, b).expect("feasible");
            let diffs: Vec<isize> = next
                .budgets()
                .iter()
                .zip(prev.budgets())
                .map(|(&x, &y)| x as isize - y as isize)
                .filter(|&d| d != 0)
                .collect();
            check.expect(diffs == [1], || format!("B={b}: step {diffs:?}"));
            prev = next;
        }
    }
    check.finish()
}

fn safeguards() -> CheckOutcome {
    let mut check = Check::new("sinks survive eviction and budgets respect the cap");
    let mut rng = rng(10);
    let trace = bundle(5, Scenario::Aligned);
    let ranking = metric_ranking(&score(&trace, &MetricSpec::keydiff()).expect("keys")).expect("finite");
    let guard = Safeguards::for_metric(MetricKind::Keydiff);
    for _ in 0..50 {
        let budgets: Vec<usize> = (0..8).map(|_| rng.random_range(guard.min_budget(64)..=64)).collect();
        let retained = apply_eviction(&ranking, &budgets, &guard).expect("valid budgets");
        let ok = retained
            .iter()
            .zip(&budgets)
            .all(|(set, &b)| set.len() == b && (0..4).all(|p| set.contains(&p)) && set.contains(&63));
        check.expect(ok, || format!("budgets {budgets:?}"));
    }
    for (r, t, expect) in [(0.8, 1000, 200), (1.0, 100, 5), (0.0, 64, 64), (0.995, 1000, 10)] {
        let b = crate::profile::budget_from_ratios(&[r], t, &guard).expect("valid ratio")[0];
        check.expect(b == expect, || format!("r={r}, T={t}: budget {b}, expected {expect}"));
    }
    check.finish()
}

fn serialization() -> CheckOutcome {
    let mut check = Check::new("trace and profile serialization roundtrip byte-identically");
    let dir = std::env::temp_dir().join(format!("lukv-selftest-{}", std::process::id()));
    let trace = bundle(7, Scenario::Mixed);
    let bytes_of = |d: &std::path::Path| -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(d)
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).collect())
            .unwrap_or_else(|_| Vec::new());
        files.sort();
        files
            .into_iter()
            .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), fs::read(&p).unwrap_or_default()))
            .collect()
    };
    let first = dir.join("a");
    let second = dir.join("b");
    let outcome = save_trace(&trace, &first)
        .and_then(|_| load_trace(&first))
        .and_then(|loaded| {
            let equal = loaded.decode_attn() == trace.decode_attn() && loaded.vnorm() == trace.vnorm();
            save_trace(&loaded, &second).map(|_| equal)
        });
    match outcome {
        Ok(equal) => {
            let (a, b) = (bytes_of(&first), bytes_of(&second));
            check.expect(equal && !a.is_empty() && a == b, || "trace bytes differ after a roundtrip".into());
        }
        Err(e) => check.expect(false, || format!("trace roundtrip failed: {e}")),
    }
    let _ = fs::remove_dir_all(&dir);

    let spec = MetricSpec::snapkv();
    let per_query: Vec<_> = (0..2)
        .map(|s| solve_ratio_grid(&bundle(s, Scenario::Misaligned), &spec, &default_grid()).expect("solvable"))
        .collect();
    let profile = aggregate_profile(&per_query, "snapkv", Safeguards::for_metric(MetricKind::Snapkv), 0.99)
        .expect("consistent grids");
    let text = profile.to_json();
    let again = Profile::from_json(&text).map(|p| p.to_json());
    check.expect(again.is_ok_and(|a| a == text), || "profile bytes differ after a roundtrip".into());
    check.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = run_selftest();
        for c in &report.checks {
            assert!(c.passed(), "{}: {:?}", c.name, c.detail);
            assert!(c.cases > 0, "{}", c.name);
        }
    }

    #[test]
    fn hull_reference() {
        assert_eq!(lower_hull(&[10.0, 6.0, 5.0, 1.0, 0.0]), vec![10.0, 6.0, 3.5, 1.0, 0.0]);
        assert_eq!(lower_hull(&[3.0]), vec![3.0]);
        assert_eq!(lower_hull(&[2.0, 2.0, 2.0]), vec![2.0, 2.0, 2.0]);
    }
}
