#![allow(dead_code)]

use lukv::{HeadIndex, ImportanceTensor, LossCurve, Ranking};
use proptest::prelude::*;

/// Importance values with frequent ties and zeros.
pub fn importance_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            1 => Just(0.0),
            1 => (0u32..4).prop_map(|k| k as f64 * 0.25),
            4 => 0.0f64..10.0,
        ],
        len,
    )
}

/// Dyadic values, so that every sum of them is exact.
pub fn dyadic_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..1024).prop_map(|k| k as f64 / 1024.0), len)
}

pub fn permutation(len: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..len).collect::<Vec<usize>>()).prop_shuffle()
}

/// A one-layer importance tensor with `heads` heads and a random ranking.
pub fn instance(max_heads: usize, max_len: usize) -> impl Strategy<Value = (ImportanceTensor, Ranking)> {
    (1..=max_heads, 1..=max_len).prop_flat_map(|(heads, len)| {
        (
            prop::collection::vec(importance_values(len), heads),
            prop::collection::vec(permutation(len), heads),
        )
            .prop_map(move |(values, orders)| {
                (
                    ImportanceTensor::from_heads(&[values]).unwrap(),
                    Ranking::from_orders(1, heads, orders).unwrap(),
                )
            })
    })
}

/// Raw loss curves built directly from ranked importances.
pub fn curves(max_heads: usize, max_len: usize) -> impl Strategy<Value = Vec<LossCurve>> {
    (1..=max_heads, 1..=max_len).prop_flat_map(|(heads, len)| {
        prop::collection::vec((importance_values(len), permutation(len)), heads).prop_map(|hs| {
            hs.iter()
                .enumerate()
                .map(|(h, (v, order))| LossCurve::from_ranked(HeadIndex::new(0, h), v, order))
                .collect()
        })
    })
}

/// Greatest convex minorant by a monotone-chain lower hull, evaluated at
/// every integer abscissa.
pub fn lower_hull(v: &[f64]) -> Vec<f64> {
    let mut hull: Vec<usize> = Vec::new();
    for i in 0..v.len() {
        while let [.., a, b] = hull[..] {
            let cross = (b - a) as f64 * (v[i] - v[a]) - (i - a) as f64 * (v[b] - v[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut out = v.to_vec();
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            *o = v[a] + (v[b] - v[a]) * (i - a) as f64 / (b - a) as f64;
        }
    }
    out
}

/// Minimum of `Σ L_h(b_h)` over all `b` with `Σ b = total`, by enumeration.
pub fn enumerate_optimum(curves: &[LossCurve], total: usize) -> Option<f64> {
    fn go(curves: &[LossCurve], left: usize, acc: f64, best: &mut Option<f64>) {
        match curves.split_first() {
            None => {
                if left == 0 && best.is_none_or(|b| acc < b) {
                    *best = Some(acc);
                }
            }
            Some((c, rest)) => {
                for b in 0..=left.min(c.capacity()) {
                    go(rest, left - b, acc + c.at(b), best);
                }
            }
        }
    }
    let mut best = None;
    go(curves, total, 0.0, &mut best);
    best
}

pub fn is_convex(values: &[f64]) -> bool {
    values.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= 0.0)
}
