//! Attention traces: the raw material every later stage consumes.
//!
//! A [`TraceBundle`] holds, for each head, the decode-time attention rows
//! restricted to prefill positions, the norms of the output-projected value
//! vectors, and optionally the prefill observation-window attention and key
//! vectors used by heuristic metrics.

mod io;
mod synth;

use std::collections::BTreeMap;

pub use io::{load_importance, load_trace, save_importance, save_trace, Manifest, TensorEntry, MANIFEST_FILE};
pub use synth::{generate_synthetic_trace, Scenario, SyntheticModel, SyntheticOptions};

use crate::error::{Error, Result};
use crate::shape::{HeadIndex, ModelShape};

/// Slack allowed on the softmax mass of a decode row.
pub const ROW_MASS_TOLERANCE: f64 = 1e-6;

/// Dense row-major `f32` tensor, last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.dims.len()];
        for (slot, &d) in index.iter_mut().zip(&self.dims).rev() {
            *slot = offset % d;
            offset /= d;
        }
        index
    }

    /// Contiguous innermost row for a head-leading tensor `[L, H, rows, cols]`.
    fn row(&self, flat_head: usize, row: usize) -> &[f32] {
        let rows = self.dims[2];
        let cols = self.dims[3];
        let start = (flat_head * rows + row) * cols;
        &self.data[start..start + cols]
    }
}

/// Attention trace for one prompt: `decode_attn[l,h,k,j]`, `vnorm[l,h,j]`,
/// optional `prefill_attn[l,h,w,j]` and `keys[l,h,j,d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBundle {
    shape: ModelShape,
    decode_attn: Tensor,
    vnorm: Tensor,
    prefill_attn: Option<Tensor>,
    keys: Option<Tensor>,
    seed: Option<u64>,
    meta: BTreeMap<String, String>,
}

impl TraceBundle {
    /// Validates every invariant: dims against the shape, finite nonnegative
    /// attention and norms, and decode rows carrying at most unit mass.
    pub fn new(
        shape: ModelShape,
        decode_attn: Tensor,
        vnorm: Tensor,
        prefill_attn: Option<Tensor>,
        keys: Option<Tensor>,
    ) -> Result<Self> {
        shape.validate()?;
        let (l, h, t, k) = (
            shape.num_layers,
            shape.num_heads,
            shape.prefill_len,
            shape.decode_len,
        );
        expect_dims("decode_attn", &decode_attn, &[l, h, k, t])?;
        expect_dims("vnorm", &vnorm, &[l, h, t])?;
        check_nonnegative("decode_attn", &decode_attn)?;
        check_nonnegative("vnorm", &vnorm)?;
        check_row_mass("decode_attn", &decode_attn)?;
        if let Some(p) = &prefill_attn {
            if p.dims().len() != 4 || p.dims()[..2] != [l, h] || p.dims()[3] != t || p.dims()[2] == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "prefill_attn dims {:?}, expected [{l}, {h}, W, {t}]",
                    p.dims()
                )));
            }
            check_nonnegative("prefill_attn", p)?;
            check_row_mass("prefill_attn", p)?;
        }
        if let Some(kv) = &keys {
            if shape.head_dim == 0 {
                return Err(Error::ShapeMismatch("keys present but d_h = 0".into()));
            }
            expect_dims("keys", kv, &[l, h, t, shape.head_dim])?;
            if let Some(i) = kv.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidValue {
                    tensor: "keys".into(),
                    index: kv.unravel(i),
                    value: kv.data()[i] as f64,
                });
            }
        }
        Ok(TraceBundle {
            shape,
            decode_attn,
            vnorm,
            prefill_attn,
            keys,
            seed: None,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn decode_attn(&self) -> &Tensor {
        &self.decode_attn
    }

    pub fn vnorm(&self) -> &Tensor {
        &self.vnorm
    }

    pub fn prefill_attn(&self) -> Option<&Tensor> {
        self.prefill_attn.as_ref()
    }

    pub fn keys(&self) -> Option<&Tensor> {
        self.keys.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    /// Number of prefill observation-window rows, if recorded.
    pub fn window_rows(&self) -> Option<usize> {
        self.prefill_attn.as_ref().map(|p| p.dims()[2])
    }

    /// Attention of decode step `step` (0-based) over prefill positions.
    pub fn decode_row(&self, head: HeadIndex, step: usize) -> &[f32] {
        self.decode_attn.row(self.shape.flat(head), step)
    }

    pub fn vnorm_head(&self, head: HeadIndex) -> &[f32] {
        let t = self.shape.prefill_len;
        let start = self.shape.flat(head) * t;
        &self.vnorm.data()[start..start + t]
    }

    /// Observation-window row `row` (0-based) over prefill positions.
    pub fn prefill_row(&self, head: HeadIndex, row: usize) -> Option<&[f32]> {
        self.prefill_attn
            .as_ref()
            .map(|p| p.row(self.shape.flat(head), row))
    }

    /// Key vector of position `pos` as a `d_h` slice.
    pub fn key(&self, head: HeadIndex, pos: usize) -> Option<&[f32]> {
        self.keys.as_ref().map(|k| k.row(self.shape.flat(head), pos))
    }
}

fn expect_dims(name: &str, tensor: &Tensor, dims: &[usize]) -> Result<()> {
    if tensor.dims() != dims {
        return Err(Error::ShapeMismatch(format!(
            "{name} dims {:?}, expected {dims:?}",
            tensor.dims()
        )));
    }
    Ok(())
}

fn check_nonnegative(name: &str, tensor: &Tensor) -> Result<()> {
    match tensor
        .data()
        .iter()
        .position(|v| v.is_nan() || v.is_infinite() || *v < 0.0)
    {
        Some(i) => Err(Error::InvalidValue {
            tensor: name.into(),
            index: tensor.unravel(i),
            value: tensor.data()[i] as f64,
        }),
        None => Ok(()),
    }
}

fn check_row_mass(name: &str, tensor: &Tensor) -> Result<()> {
    let cols = *tensor.dims().last().unwrap_or(&1);
    for (r, row) in tensor.data().chunks(cols.max(1)).enumerate() {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if sum > 1.0 + ROW_MASS_TOLERANCE {
            let mut index = tensor.unravel(r * cols);
            index.pop();
            return Err(Error::RowMass {
                tensor: name.into(),
                index,
                sum,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(decode: Vec<f32>) -> Result<TraceBundle> {
        let shape = ModelShape::new(1, 1, 2, 1, 0)?;
        TraceBundle::new(
            shape,
            Tensor::new(vec![1, 1, 1, 2], decode)?,
            Tensor::new(vec![1, 1, 2], vec![1.0, 1.0])?,
            None,
            None,
        )
    }

    #[test]
    fn accepts_sub_unit_rows() {
        let b = tiny(vec![0.5, 0.25]).unwrap();
        assert_eq!(b.decode_row(HeadIndex::new(0, 0), 0), &[0.5, 0.25]);
    }

    #[test]
    fn rejects_nan_with_index() {
        match tiny(vec![0.5, f32::NAN]) {
            Err(Error::InvalidValue { tensor, index, .. }) => {
                assert_eq!(tensor, "decode_attn");
                assert_eq!(index, vec![0, 0, 0, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_negative_and_overfull_rows() {
        assert!(matches!(tiny(vec![-0.1, 0.2]), Err(Error::InvalidValue { .. })));
        assert!(matches!(tiny(vec![0.7, 0.7]), Err(Error::RowMass { .. })));
    }

    #[test]
    fn unravel_is_row_major() {
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!(t.unravel(23), vec![1, 2, 3]);
        assert_eq!(t.unravel(5), vec![0, 1, 1]);
    }
}
