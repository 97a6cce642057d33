//! Model geometry and per-head value storage shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of a traced model: `L` layers of `H` heads, a prefill of `T`
/// tokens and `K_max` decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    #[serde(rename = "L")]
    pub num_layers: usize,
    #[serde(rename = "H")]
    pub num_heads: usize,
    #[serde(rename = "T")]
    pub prefill_len: usize,
    #[serde(rename = "K_max")]
    pub decode_len: usize,
    /// Key dimension; zero when no key vectors are stored.
    #[serde(rename = "d_h")]
    pub head_dim: usize,
}

impl ModelShape {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        prefill_len: usize,
        decode_len: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let shape = ModelShape {
            num_layers,
            num_heads,
            prefill_len,
            decode_len,
            head_dim,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("L", self.num_layers),
            ("H", self.num_heads),
            ("T", self.prefill_len),
            ("K_max", self.decode_len),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidShape(format!("{name} must be at least 1")));
        }
        let attn = [self.num_layers, self.num_heads, self.decode_len, self.prefill_len]
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let keys = self
            .head_count()
            .checked_mul(self.prefill_len)
            .and_then(|n| n.checked_mul(self.head_dim.max(1)));
        match (attn, keys) {
            (Some(a), Some(k)) if a <= isize::MAX as usize / 8 && k <= isize::MAX as usize / 8 => {
                Ok(())
            }
            _ => Err(Error::InvalidShape("tensor size overflows".into())),
        }
    }

    pub fn head_count(&self) -> usize {
        self.num_layers * self.num_heads
    }

    /// Flat index of a head in layer-major order.
    pub fn flat(&self, head: HeadIndex) -> usize {
        head.layer * self.num_heads + head.head
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadIndex> + '_ {
        (0..self.num_layers)
            .flat_map(move |layer| (0..self.num_heads).map(move |head| HeadIndex { layer, head }))
    }

    pub fn check_head(&self, head: HeadIndex) -> Result<()> {
        if head.layer < self.num_layers && head.head < self.num_heads {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "head ({}, {}) outside {}x{}",
                head.layer, head.head, self.num_layers, self.num_heads
            )))
        }
    }
}

/// An attention head, addressed by 0-based layer and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadIndex {
    pub layer: usize,
    pub head: usize,
}

impl HeadIndex {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadIndex { layer, head }
    }
}

/// One `f64` vector of equal length per head, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    num_layers: usize,
    num_heads: usize,
    len: usize,
    data: Vec<f64>,
}

impl HeadValues {
    pub fn zeros(num_layers: usize, num_heads: usize, len: usize) -> Self {
        HeadValues {
            num_layers,
            num_heads,
            len,
            data: vec![0.0; num_layers * num_heads * len],
        }
    }

    pub fn from_vec(num_layers: usize, num_heads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != num_layers * num_heads * len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {num_layers}x{num_heads}x{len}",
                data.len()
            )));
        }
        Ok(HeadValues {
            num_layers,
            num_heads,
            len,
            data,
        })
    }

    /// Builds from nested `[layer][head][position]` vectors.
    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let num_layers = nested.len();
        let num_heads = nested.first().map_or(0, Vec::len);
        let len = nested.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(num_layers * num_heads * len);
        for layer in nested {
            if layer.len() != num_heads {
                return Err(Error::ShapeMismatch("ragged head axis".into()));
            }
            for head in layer {
                if head.len() != len {
                    return Err(Error::ShapeMismatch("ragged position axis".into()));
                }
                data.extend_from_slice(head);
            }
        }
        Self::from_vec(num_layers, num_heads, len, data)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Positions per head.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn head(&self, head: HeadIndex) -> &[f64] {
        let start = (head.layer * self.num_heads + head.head) * self.len;
        &self.data[start..start + self.len]
    }

    pub fn head_mut(&mut self, head: HeadIndex) -> &mut [f64] {
        let start = (head.layer * self.num_heads + head.head) * self.len;
        &mut self.data[start..start + self.len]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        let width = self.num_heads * self.len;
        &self.data[layer * width..(layer + 1) * width]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [f64] {
        let width = self.num_heads * self.len;
        &mut self.data[layer * width..(layer + 1) * width]
    }

    /// Iterates per-head slices in layer-major order.
    pub fn iter_heads(&self) -> impl Iterator<Item = (HeadIndex, &[f64])> {
        let heads = self.num_heads;
        self.data
            .chunks(self.len.max(1))
            .take(self.num_layers * self.num_heads)
            .enumerate()
            .map(move |(i, chunk)| (HeadIndex::new(i / heads, i % heads), chunk))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_layers)
            .map(|l| {
                (0..self.num_heads)
                    .map(|h| self.head(HeadIndex::new(l, h)).to_vec())
                    .collect()
            })
            .collect()
    }
}

/// Snaps `fraction * n` to the nearest integer when it lies within a
/// rounding error of it, and floors otherwise.
///
/// `(1.0 - 0.8) * 1000.0` evaluates to `199.99999999999997`; budgets derived
/// from ratios must still come out as `200`.
pub fn floor_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    if x <= 0.0 {
        return 0;
    }
    let nearest = x.round();
    let tol = 1e-9 * (n as f64).max(1.0);
    let v = if (x - nearest).abs() <= tol { nearest } else { x.floor() };
    (v as usize).min(n)
}

/// Ceiling counterpart of [`floor_fraction`]: `(1.0 - 0.99) * 100.0` gives `1`.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    if x <= 0.0 {
        return 0;
    }
    let nearest = x.round();
    let tol = 1e-9 * (n as f64).max(1.0);
    let v = if (x - nearest).abs() <= tol { nearest } else { x.ceil() };
    (v as usize).min(n)
}
