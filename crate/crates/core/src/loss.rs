//! Eviction loss of a head and its decomposition against the oracle.
//!
//! Evicting every position outside a retained set `M` costs the importance
//! mass of what was dropped. Under a budget `b`, a metric's top-`b` set
//! differs from the oracle's top-`b` set by its misses and false positives,
//! and
//!
//! ```text
//! loss(metric top-b) = loss(oracle top-b) + sum(I[misses]) - sum(I[false positives])
//! ```
//!
//! where the last two terms form the optimality gap, which is never negative.
//!
//! Set masses in this module are summed in descending value order. Floating
//! addition is monotone, so a set whose sorted values dominate another's
//! elementwise never sums to less; this keeps orderings such as
//! "oracle recall >= metric recall" exact rather than approximate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::{ImportanceTensor, Ranking};
use crate::shape::{floor_fraction, HeadIndex};

/// Cumulative eviction loss of a head as its budget grows from 0 to `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub head: HeadIndex,
    values: Vec<f64>,
}

impl LossCurve {
    /// `values[i]` is the mass outside the first `i` entries of `order`.
    pub fn from_ranked(head: HeadIndex, importance: &[f64], order: &[usize]) -> Self {
        let mut values = vec![0.0; order.len() + 1];
        for i in (0..order.len()).rev() {
            values[i] = values[i + 1] + importance[order[i]];
        }
        LossCurve { head, values }
    }

    /// Wraps explicit curve values; they must be finite and non-increasing.
    pub fn from_values(head: HeadIndex, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("a loss curve needs at least one point".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("curve value {v} is not finite")));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidCurve { index: i });
        }
        Ok(LossCurve { head, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Loss at budget `b`.
    pub fn at(&self, b: usize) -> f64 {
        self.values[b]
    }

    /// Largest budget, i.e. the number of cached positions.
    pub fn capacity(&self) -> usize {
        self.values.len() - 1
    }

    pub fn total_mass(&self) -> f64 {
        self.values[0]
    }

    /// Scales every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        LossCurve {
            head: self.head,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetDecomposition {
    pub budget: usize,
    pub hits: Vec<usize>,
    pub misses: Vec<usize>,
    pub false_positives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapDecomposition {
    pub heuristic_loss: f64,
    pub oracle_loss: f64,
    pub optimality_gap: f64,
}

/// Sum of `values` taken in descending order.
pub fn sum_descending(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.into_iter().sum()
}

fn retained_mask(len: usize, retained: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; len];
    for &p in retained {
        *mask.get_mut(p).ok_or(Error::OutOfRange { position: p, len })? = true;
    }
    Ok(mask)
}

/// Importance mass of `head` outside `retained`.
pub fn eviction_loss(importance: &ImportanceTensor, head: HeadIndex, retained: &[usize]) -> Result<f64> {
    let values = importance.head(head);
    let mask = retained_mask(values.len(), retained)?;
    Ok(sum_descending(
        values.iter().zip(&mask).filter(|(_, &keep)| !keep).map(|(&v, _)| v),
    ))
}

pub fn loss_curve(importance: &ImportanceTensor, head: HeadIndex, ranking: &Ranking) -> LossCurve {
    LossCurve::from_ranked(head, importance.head(head), ranking.head(head))
}

/// Loss curves of every head in layer-major order.
pub fn loss_curves(importance: &ImportanceTensor, ranking: &Ranking) -> Vec<LossCurve> {
    (0..importance.num_layers())
        .flat_map(|l| (0..importance.num_heads()).map(move |h| HeadIndex::new(l, h)))
        .map(|head| loss_curve(importance, head, ranking))
        .collect()
}

/// Splits the metric's top-`b` set against the oracle's and evaluates the
/// loss identity at budget `b`.
pub fn decompose(
    importance: &ImportanceTensor,
    head: HeadIndex,
    oracle_rank: &Ranking,
    metric_rank: &Ranking,
    b: usize,
) -> Result<(SetDecomposition, GapDecomposition)> {
    let values = importance.head(head);
    let t = values.len();
    if b > t {
        return Err(Error::OutOfRange { position: b, len: t });
    }
    let oracle = retained_mask(t, oracle_rank.prefix(head, b))?;
    let metric = retained_mask(t, metric_rank.prefix(head, b))?;
    let mut sets = SetDecomposition {
        budget: b,
        hits: Vec::new(),
        misses: Vec::new(),
        false_positives: Vec::new(),
    };
    for j in 0..t {
        match (oracle[j], metric[j]) {
            (true, true) => sets.hits.push(j),
            (true, false) => sets.misses.push(j),
            (false, true) => sets.false_positives.push(j),
            (false, false) => {}
        }
    }
    let outside = |mask: &[bool]| {
        sum_descending(values.iter().zip(mask).filter(|(_, &k)| !k).map(|(&v, _)| v))
    };
    let gap = sum_descending(sets.misses.iter().map(|&j| values[j]))
        - sum_descending(sets.false_positives.iter().map(|&j| values[j]));
    Ok((
        sets,
        GapDecomposition {
            heuristic_loss: outside(&metric),
            oracle_loss: outside(&oracle),
            optimality_gap: gap,
        },
    ))
}

/// Fraction of the head's importance mass kept at each compression ratio
/// `sigma`, with budget `floor((1 - sigma) T)`.
pub fn recall_curve(
    importance: &ImportanceTensor,
    head: HeadIndex,
    ranking: &Ranking,
    ratios: &[f64],
) -> Result<Vec<f64>> {
    if let Some(s) = ratios.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Config(format!("compression ratio {s} outside [0, 1]")));
    }
    let values = importance.head(head);
    let total = sum_descending(values.iter().copied());
    let order = ranking.head(head);
    Ok(ratios
        .iter()
        .map(|&sigma| {
            if total <= 0.0 {
                return 1.0;
            }
            let b = floor_fraction(1.0 - sigma, values.len());
            sum_descending(order[..b].iter().map(|&j| values[j])) / total
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondDifference {
    /// Curve point `i` in `1..T`.
    pub index: usize,
    /// `L(i+1) - 2 L(i) + L(i-1)` from the curve.
    pub value: f64,
    /// `I[rank_i] - I[rank_{i+1}]`, the same quantity from the increments.
    pub increment_form: f64,
}

/// All interior second differences of the head's loss curve.
pub fn second_differences(importance: &ImportanceTensor, head: HeadIndex, ranking: &Ranking) -> Vec<SecondDifference> {
    let values = importance.head(head);
    let order = ranking.head(head);
    let curve = LossCurve::from_ranked(head, values, order);
    let l = curve.values();
    (1..order.len())
        .map(|i| SecondDifference {
            index: i,
            value: l[i + 1] - 2.0 * l[i] + l[i - 1],
            increment_form: values[order[i - 1]] - values[order[i]],
        })
        .collect()
}

/// Points where the loss curve bends the wrong way, i.e. where the ranking
/// places a less important token before a more important one. The sign is
/// read from the exact increment form, so the result is empty exactly when
/// importances are non-increasing along the ranking.
pub fn second_difference_witness(
    importance: &ImportanceTensor,
    head: HeadIndex,
    ranking: &Ranking,
) -> Vec<SecondDifference> {
    second_differences(importance, head, ranking)
        .into_iter()
        .filter(|d| d.increment_form < 0.0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::oracle_ranking;

    const H0: HeadIndex = HeadIndex { layer: 0, head: 0 };

    fn imp(v: &[f64]) -> ImportanceTensor {
        ImportanceTensor::from_heads(&[vec![v.to_vec()]]).unwrap()
    }

    fn rank(order: &[usize]) -> Ranking {
        Ranking::from_orders(1, 1, vec![order.to_vec()]).unwrap()
    }

    #[test]
    fn eviction_loss_examples() {
        let i = imp(&[3.0, 1.0, 2.0]);
        assert_eq!(eviction_loss(&i, H0, &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(eviction_loss(&i, H0, &[]).unwrap(), 6.0);
        assert_eq!(eviction_loss(&i, H0, &[0, 2]).unwrap(), 1.0);
        assert!(matches!(
            eviction_loss(&i, H0, &[3]),
            Err(Error::OutOfRange { position: 3, len: 3 })
        ));
    }

    #[test]
    fn curve_examples() {
        let i = imp(&[3.0, 1.0, 2.0]);
        assert_eq!(loss_curve(&i, H0, &oracle_ranking(&i)).values(), &[6.0, 3.0, 1.0, 0.0]);
        assert_eq!(loss_curve(&i, H0, &rank(&[1, 0, 2])).values(), &[6.0, 5.0, 2.0, 0.0]);
        let z = imp(&[0.0; 4]);
        assert!(loss_curve(&z, H0, &oracle_ranking(&z)).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decomposition_example() {
        let i = imp(&[5.0, 3.0, 2.0, 1.0]);
        let (sets, gap) = decompose(&i, H0, &oracle_ranking(&i), &rank(&[0, 3, 1, 2]), 2).unwrap();
        assert_eq!(sets.hits, vec![0]);
        assert_eq!(sets.misses, vec![1]);
        assert_eq!(sets.false_positives, vec![3]);
        assert_eq!(gap.oracle_loss, 3.0);
        assert_eq!(gap.optimality_gap, 2.0);
        assert_eq!(gap.heuristic_loss, 5.0);
    }

    #[test]
    fn decomposition_boundaries() {
        let i = imp(&[5.0, 3.0, 2.0, 1.0]);
        let m = rank(&[3, 2, 1, 0]);
        let o = oracle_ranking(&i);
        let (sets, gap) = decompose(&i, H0, &o, &m, 0).unwrap();
        assert!(sets.hits.is_empty() && sets.misses.is_empty() && sets.false_positives.is_empty());
        assert_eq!(gap.optimality_gap, 0.0);
        let (sets, gap) = decompose(&i, H0, &o, &m, 4).unwrap();
        assert_eq!(sets.hits, vec![0, 1, 2, 3]);
        assert_eq!(gap.optimality_gap, 0.0);
        for b in 0..=4 {
            assert_eq!(decompose(&i, H0, &o, &o, b).unwrap().1.optimality_gap, 0.0);
        }
    }

    #[test]
    fn recall_examples() {
        let i = imp(&[3.0, 1.0, 2.0]);
        let o = oracle_ranking(&i);
        let r = recall_curve(&i, H0, &o, &[0.0, 1.0 / 3.0, 1.0]).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[1], 5.0 / 6.0);
        assert_eq!(r[2], 0.0);
        let z = imp(&[0.0; 3]);
        assert_eq!(recall_curve(&z, H0, &oracle_ranking(&z), &[0.5, 1.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn witness_examples() {
        let i = imp(&[3.0, 1.0, 2.0]);
        assert!(second_difference_witness(&i, H0, &oracle_ranking(&i)).is_empty());
        let d = second_differences(&i, H0, &rank(&[0, 1, 2]));
        assert_eq!(d.iter().map(|d| d.value).collect::<Vec<_>>(), vec![2.0, -1.0]);
        let w = second_difference_witness(&i, H0, &rank(&[0, 1, 2]));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].index, 2);
        let c = imp(&[0.5; 5]);
        assert!(second_differences(&c, H0, &rank(&[4, 2, 0, 1, 3]))
            .iter()
            .all(|d| d.value == 0.0));
    }

    #[test]
    fn from_values_rejects_increase() {
        assert!(matches!(
            LossCurve::from_values(H0, vec![3.0, 1.0, 2.0]),
            Err(Error::InvalidCurve { index: 1 })
        ));
    }
}
