mod common;

use common::{curves, enumerate_optimum, is_convex, lower_hull};
use lukv::solver::{
    baseline_allocate, brute_force_allocate, convexify_all, greedy_allocate, greedy_order, mckp_dp_allocate,
    pava_convexify, Baseline, MckpSolver,
};
use lukv::{HeadIndex, HeadValues, LossCurve};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn surrogate_is_the_lower_hull(curve in curves(1, 64).prop_map(|c| c[0].clone())) {
        let s = pava_convexify(&curve).unwrap();
        let hull = lower_hull(curve.values());
        for (i, (a, b)) in s.values().iter().zip(&hull).enumerate() {
            prop_assert!((a - b).abs() <= 1e-9, "point {i}: {a} vs {b}");
        }
        prop_assert_eq!(s.at(0), curve.at(0));
        prop_assert_eq!(s.at(curve.capacity()), curve.at(curve.capacity()));
        prop_assert!(s.values().windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(s.values().windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= -1e-12));
        prop_assert!(s.values().iter().zip(curve.values()).all(|(a, b)| *a <= *b));
        // contact points carry the raw value exactly
        for (i, &c) in s.contact().iter().enumerate() {
            if c {
                prop_assert_eq!(s.at(i), curve.at(i));
            }
        }
    }

    #[test]
    fn gains_telescope_to_the_surrogate(curve in curves(1, 64).prop_map(|c| c[0].clone())) {
        let (convex, gains) = convexify_all(std::slice::from_ref(&curve)).unwrap();
        let g = gains[0].gains();
        prop_assert!(g.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(g.iter().all(|&x| x >= 0.0));
        for b in 0..=curve.capacity() {
            prop_assert!((gains[0].loss_at(b) - convex[0].at(b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn greedy_matches_dp_on_the_surrogate(cs in curves(12, 32), frac in 0.0f64..=1.0) {
        let (convex, gains) = convexify_all(&cs).unwrap();
        let surrogate: Vec<LossCurve> = convex.iter().map(|c| c.as_curve()).collect();
        let capacity: usize = cs.iter().map(LossCurve::capacity).sum();
        let b = (frac * capacity as f64) as usize;
        let greedy = greedy_allocate(&gains, b).unwrap().relaxed_loss_on(&convex);
        let dp = mckp_dp_allocate(&surrogate, b).unwrap().loss_on(&surrogate);
        prop_assert!((greedy - dp).abs() <= 1e-9, "greedy {greedy} vs DP {dp}");
    }

    #[test]
    fn exact_solvers_agree_with_enumeration(cs in curves(4, 6)) {
        let capacity: usize = cs.iter().map(LossCurve::capacity).sum();
        let (_, gains) = convexify_all(&cs).unwrap();
        let convex = cs.iter().all(|c| is_convex(c.values()));
        for b in 0..=capacity {
            let dp = mckp_dp_allocate(&cs, b).unwrap();
            let brute = brute_force_allocate(&cs, b).unwrap();
            let reference = enumerate_optimum(&cs, b).unwrap();
            prop_assert_eq!(dp.objective, brute.objective);
            prop_assert!((dp.loss_on(&cs) - reference).abs() <= 1e-9);
            let gap = greedy_allocate(&gains, b).unwrap().loss_on(&cs) - dp.loss_on(&cs);
            prop_assert!(gap >= -1e-12, "B={b}: greedy beat the optimum by {gap}");
            if convex {
                prop_assert!(gap.abs() <= 1e-9, "B={b}: convex curves but gap {gap}");
            }
        }
    }

    #[test]
    fn every_allocator_conserves_budget(
        (l, h, t) in (1usize..4, 1usize..5, 1usize..40),
        frac in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let n = l * h;
        let scores = HeadValues::from_vec(l, h, t, (0..n * t).map(|i| ((i as u64 ^ seed) % 97) as f64).collect()).unwrap();
        let cs: Vec<LossCurve> = (0..n)
            .map(|f| {
                let v: Vec<f64> = (0..t).map(|j| ((f * 31 + j * 17) as u64 ^ seed) as f64 % 13.0).collect();
                LossCurve::from_ranked(HeadIndex::new(f / h, f % h), &v, &(0..t).collect::<Vec<_>>())
            })
            .collect();
        let (_, gains) = convexify_all(&cs).unwrap();
        let b = (frac * (n * t) as f64) as usize;
        let mut allocations = vec![
            greedy_allocate(&gains, b).unwrap(),
            baseline_allocate(Baseline::Uniform, l, h, t, None, b).unwrap(),
            baseline_allocate(Baseline::pyramid(), l, h, t, None, b).unwrap(),
            baseline_allocate(Baseline::adaptive_topk(), l, h, t, Some(&scores), b).unwrap(),
        ];
        if n * t * b <= 200_000 {
            allocations.push(mckp_dp_allocate(&cs, b).unwrap());
        }
        for a in allocations {
            prop_assert_eq!(a.budgets().iter().sum::<usize>(), b, "{}", a.solver);
            prop_assert!(a.budgets().iter().all(|&x| x <= t), "{}", a.solver);
            prop_assert_eq!((a.num_layers(), a.num_heads()), (l, h));
        }
        prop_assert!(baseline_allocate(Baseline::Uniform, l, h, t, None, n * t + 1).is_err());
    }

    #[test]
    fn greedy_solutions_nest(cs in curves(8, 24)) {
        let capacity: usize = cs.iter().map(LossCurve::capacity).sum();
        let (_, gains) = convexify_all(&cs).unwrap();
        let order = greedy_order(&gains, capacity).unwrap();
        let mut prev = greedy_allocate(&gains, 0).unwrap();
        for b in 1..=capacity {
            let next = greedy_allocate(&gains, b).unwrap();
            let changed: Vec<usize> = (0..cs.len()).filter(|&i| next.budgets()[i] != prev.budgets()[i]).collect();
            prop_assert_eq!(changed.len(), 1);
            let i = changed[0];
            prop_assert_eq!(next.budgets()[i], prev.budgets()[i] + 1);
            prop_assert_eq!(order[b - 1], i);
            prev = next;
        }
    }

    #[test]
    fn argmins_ignore_power_of_two_scaling(cs in curves(4, 10), exp in -8i32..8, frac in 0.0f64..=1.0) {
        // scaling by 2^k is exact, so every comparison is unchanged
        let c = 2f64.powi(exp);
        let scaled: Vec<LossCurve> = cs.iter().map(|x| x.scaled(c)).collect();
        let capacity: usize = cs.iter().map(LossCurve::capacity).sum();
        let b = (frac * capacity as f64) as usize;
        let (_, g1) = convexify_all(&cs).unwrap();
        let (_, g2) = convexify_all(&scaled).unwrap();
        let budgets = |a: lukv::Result<lukv::BudgetAllocation>| a.unwrap().budgets().to_vec();
        prop_assert_eq!(budgets(greedy_allocate(&g1, b)), budgets(greedy_allocate(&g2, b)));
        prop_assert_eq!(budgets(mckp_dp_allocate(&cs, b)), budgets(mckp_dp_allocate(&scaled, b)));
        prop_assert_eq!(budgets(brute_force_allocate(&cs, b)), budgets(brute_force_allocate(&scaled, b)));
    }

    #[test]
    fn one_dp_table_serves_every_total(cs in curves(5, 12)) {
        let capacity: usize = cs.iter().map(LossCurve::capacity).sum();
        let solver = MckpSolver::new(&cs, capacity).unwrap();
        for b in 0..=capacity {
            prop_assert_eq!(solver.allocate(b).unwrap(), mckp_dp_allocate(&cs, b).unwrap());
        }
        prop_assert!(solver.allocate(capacity + 1).is_err());
    }
}

#[test]
fn worked_convexification() {
    let curve = LossCurve::from_values(HeadIndex::new(0, 0), vec![10.0, 6.0, 5.0, 1.0, 0.0]).unwrap();
    let s = pava_convexify(&curve).unwrap();
    assert_eq!(s.values(), &[10.0, 6.0, 3.5, 1.0, 0.0]);
}

#[test]
fn worked_allocation() {
    let cs = vec![
        LossCurve::from_values(HeadIndex::new(0, 0), vec![10.0, 9.0, 2.0, 2.0]).unwrap(),
        LossCurve::from_values(HeadIndex::new(0, 1), vec![8.0, 4.0, 3.0, 0.0]).unwrap(),
    ];
    let dp = mckp_dp_allocate(&cs, 3).unwrap();
    assert_eq!(dp.budgets(), &[2, 1]);
    assert_eq!(dp.loss_on(&cs), 6.0);
    assert_eq!(enumerate_optimum(&cs, 3), Some(6.0));
}
