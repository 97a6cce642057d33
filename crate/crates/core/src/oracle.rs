//! Ground-truth long-horizon importance and the rankings built on it.
//!
//! The importance of prefill position `j` in a head is the largest
//! contribution it makes to the head output over the decode window:
//!
//! ```text
//! I[l,h,j] = max_k  A[l,h,k,j] * ||v[l,h,j] W_O[l,h]||
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shape::{HeadIndex, HeadValues};
use crate::trace::TraceBundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Each layer's values divided by that layer's total mass.
    IntraLayer,
}

impl Normalization {
    pub fn as_str(&self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::IntraLayer => "intra_layer",
        }
    }
}

/// Oracle importance per cached position, `[L, H, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTensor {
    values: HeadValues,
    normalization: Normalization,
}

impl ImportanceTensor {
    pub fn from_parts(values: HeadValues, normalization: Normalization) -> Self {
        ImportanceTensor {
            values,
            normalization,
        }
    }

    /// Raw importance from explicit per-head vectors; handy for small examples.
    pub fn from_heads(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let values = HeadValues::from_nested(nested)?;
        if let Some(&v) = values.as_slice().iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Config(format!("importance value {v} is not a nonnegative real")));
        }
        Ok(ImportanceTensor {
            values,
            normalization: Normalization::Raw,
        })
    }

    pub fn values(&self) -> &HeadValues {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn head(&self, head: HeadIndex) -> &[f64] {
        self.values.head(head)
    }

    pub fn num_layers(&self) -> usize {
        self.values.num_layers()
    }

    pub fn num_heads(&self) -> usize {
        self.values.num_heads()
    }

    /// Cached positions per head.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.as_slice().iter().sum()
    }

    /// Divides each layer by its own total; zero-mass layers stay zero.
    pub fn normalized(&self) -> Self {
        let mut values = self.values.clone();
        for layer in 0..values.num_layers() {
            let slice = values.layer_mut(layer);
            let total: f64 = slice.iter().sum();
            if total > 0.0 {
                slice.iter_mut().for_each(|v| *v /= total);
            }
        }
        ImportanceTensor {
            values,
            normalization: Normalization::IntraLayer,
        }
    }
}

/// Per-head orderings of positions, most important first.
///
/// The length-`k` prefix of a head's order is the retained set of a top-`k`
/// policy for that head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    num_layers: usize,
    num_heads: usize,
    len: usize,
    order: Vec<usize>,
}

impl Ranking {
    /// Descending sort of each head's scores, ties broken by ascending
    /// position. Scores must not be NaN.
    pub fn from_scores(scores: &HeadValues) -> Result<Self> {
        let len = scores.len();
        let mut order = Vec::with_capacity(scores.as_slice().len());
        for (head, values) in scores.iter_heads() {
            if let Some(position) = values.iter().position(|v| v.is_nan()) {
                return Err(Error::InvalidScore {
                    layer: head.layer,
                    head: head.head,
                    position,
                });
            }
            order.extend(rank_descending(values));
        }
        Ok(Ranking {
            num_layers: scores.num_layers(),
            num_heads: scores.num_heads(),
            len,
            order,
        })
    }

    /// Wraps explicit per-head permutations.
    pub fn from_orders(num_layers: usize, num_heads: usize, orders: Vec<Vec<usize>>) -> Result<Self> {
        if orders.len() != num_layers * num_heads {
            return Err(Error::ShapeMismatch(format!(
                "{} orders for {num_layers}x{num_heads} heads",
                orders.len()
            )));
        }
        let len = orders.first().map_or(0, Vec::len);
        for o in &orders {
            let mut seen = vec![false; len];
            if o.len() != len || !o.iter().all(|&p| p < len && !std::mem::replace(&mut seen[p], true)) {
                return Err(Error::ShapeMismatch("order is not a permutation".into()));
            }
        }
        Ok(Ranking {
            num_layers,
            num_heads,
            len,
            order: orders.concat(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn head(&self, head: HeadIndex) -> &[usize] {
        let start = (head.layer * self.num_heads + head.head) * self.len;
        &self.order[start..start + self.len]
    }

    /// The top-`k` retained positions of `head`.
    pub fn prefix(&self, head: HeadIndex, k: usize) -> &[usize] {
        &self.head(head)[..k.min(self.len)]
    }
}

/// Positions sorted by descending value, ties by ascending position.
/// `-0.0` and `0.0` compare equal.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Oracle importance of every cached position; optionally normalized within
/// each layer.
pub fn compute_oracle_importance(trace: &TraceBundle, normalize: bool) -> Result<ImportanceTensor> {
    let shape = *trace.shape();
    let t = shape.prefill_len;
    let mut values = HeadValues::zeros(shape.num_layers, shape.num_heads, t);
    for head in shape.heads() {
        let vnorm = trace.vnorm_head(head);
        let out = values.head_mut(head);
        for step in 0..shape.decode_len {
            let row = trace.decode_row(head, step);
            for ((o, &a), &v) in out.iter_mut().zip(row).zip(vnorm) {
                // f32 x f32 is exact in f64
                let c = a as f64 * v as f64;
                if c > *o {
                    *o = c;
                }
            }
        }
    }
    let raw = ImportanceTensor {
        values,
        normalization: Normalization::Raw,
    };
    Ok(if normalize { raw.normalized() } else { raw })
}

/// Ranking by descending oracle importance: the oracle metric.
pub fn oracle_ranking(importance: &ImportanceTensor) -> Ranking {
    Ranking::from_scores(importance.values()).expect("importance holds no NaN")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::ModelShape;
    use crate::trace::Tensor;

    fn bundle(attn: Vec<f32>, k: usize, vnorm: Vec<f32>) -> TraceBundle {
        let t = vnorm.len();
        let shape = ModelShape::new(1, 1, t, k, 0).unwrap();
        TraceBundle::new(
            shape,
            Tensor::new(vec![1, 1, k, t], attn).unwrap(),
            Tensor::new(vec![1, 1, t], vnorm).unwrap(),
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn single_step_product() {
        let b = bundle(vec![0.5], 1, vec![2.0]);
        let i = compute_oracle_importance(&b, false).unwrap();
        assert_eq!(i.head(HeadIndex::new(0, 0)), &[1.0]);
    }

    #[test]
    fn max_over_steps() {
        let b = bundle(vec![0.1, 0.4, 0.2], 3, vec![3.0]);
        let i = compute_oracle_importance(&b, false).unwrap();
        // brute force: max(0.1*3, 0.4*3, 0.2*3)
        let expected = [0.1f32, 0.4, 0.2]
            .iter()
            .map(|&a| a as f64 * 3.0)
            .fold(0.0, f64::max);
        assert_eq!(i.head(HeadIndex::new(0, 0))[0], expected);
        assert!((expected - 1.2).abs() < 1e-7);
    }

    #[test]
    fn zero_vnorm_gives_zero_importance() {
        let b = bundle(vec![0.3, 0.3], 1, vec![0.0, 0.0]);
        let i = compute_oracle_importance(&b, true).unwrap();
        assert_eq!(i.head(HeadIndex::new(0, 0)), &[0.0, 0.0]);
        assert_eq!(i.normalization(), Normalization::IntraLayer);
    }

    #[test]
    fn ranking_ties_by_position() {
        let imp = ImportanceTensor::from_heads(&[vec![vec![0.0, 0.0, 0.0]]]).unwrap();
        assert_eq!(oracle_ranking(&imp).head(HeadIndex::new(0, 0)), &[0, 1, 2]);
        let imp = ImportanceTensor::from_heads(&[vec![vec![2.0, 5.0, 5.0, 1.0]]]).unwrap();
        assert_eq!(oracle_ranking(&imp).head(HeadIndex::new(0, 0)), &[1, 2, 0, 3]);
    }

    #[test]
    fn normalized_layers_sum_to_one() {
        let imp = ImportanceTensor::from_heads(&[
            vec![vec![1.0, 3.0], vec![4.0, 0.0]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        ])
        .unwrap()
        .normalized();
        assert!((imp.values().layer(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(imp.values().layer(1), &[0.0; 4]);
    }

    #[test]
    fn from_orders_rejects_non_permutations() {
        assert!(Ranking::from_orders(1, 1, vec![vec![0, 0, 1]]).is_err());
        assert!(Ranking::from_orders(1, 1, vec![vec![2, 0, 1]]).is_ok());
    }
}
