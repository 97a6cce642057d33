//! Trace directory format.
//!
//! ```text
//! trace/
//!   manifest.json        schema_version, shape, tensors, seed?, meta?
//!   decode_attn.f32      [L, H, K_max, T]
//!   vnorm.f32            [L, H, T]
//!   prefill_attn.f32     [L, H, W, T]     (optional)
//!   keys.f32             [L, H, T, d_h]   (optional)
//! ```
//!
//! Tensor files are raw little-endian `f32`, row-major, no header.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Tensor, TraceBundle};
use crate::error::{Error, Result};
use crate::oracle::{ImportanceTensor, Normalization};
use crate::shape::{HeadValues, ModelShape};

pub const MANIFEST_FILE: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;
const DTYPE: &str = "f32le";
const IMPORTANCE: &str = "oracle_importance";
const IMPORTANCE_NORM_KEY: &str = "oracle_importance.normalization";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dims: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub shape: ModelShape,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingFile {
                tensor: MANIFEST_FILE.into(),
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Manifest {
                path,
                reason: format!("unsupported schema_version {}", manifest.schema_version),
            });
        }
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Writes `bundle` under `dir` (created if absent) and returns the manifest path.
pub fn save_trace(bundle: &TraceBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    let mut named: Vec<(&str, &Tensor)> = vec![
        ("decode_attn", bundle.decode_attn()),
        ("vnorm", bundle.vnorm()),
    ];
    if let Some(p) = bundle.prefill_attn() {
        named.push(("prefill_attn", p));
    }
    if let Some(k) = bundle.keys() {
        named.push(("keys", k));
    }
    for (name, tensor) in named {
        tensors.insert(name.to_string(), write_tensor(dir, name, tensor)?);
    }
    Manifest {
        schema_version: SCHEMA_VERSION,
        shape: *bundle.shape(),
        tensors,
        seed: bundle.seed(),
        meta: bundle.meta().clone(),
    }
    .write(dir)
}

/// Reads a trace directory written by [`save_trace`] or an external capture.
pub fn load_trace(dir: impl AsRef<Path>) -> Result<TraceBundle> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    let shape = manifest.shape;
    shape.validate()?;
    let required = |name: &str| -> Result<Tensor> {
        let entry = manifest.tensors.get(name).ok_or_else(|| Error::Manifest {
            path: dir.join(MANIFEST_FILE),
            reason: format!("required tensor `{name}` not declared"),
        })?;
        read_tensor(dir, name, entry)
    };
    let optional = |name: &str| -> Result<Option<Tensor>> {
        manifest
            .tensors
            .get(name)
            .map(|entry| read_tensor(dir, name, entry))
            .transpose()
    };
    let decode_attn = required("decode_attn")?;
    let vnorm = required("vnorm")?;
    let prefill_attn = optional("prefill_attn")?;
    let keys = optional("keys")?;
    Ok(TraceBundle::new(shape, decode_attn, vnorm, prefill_attn, keys)?
        .with_seed(manifest.seed)
        .with_meta(manifest.meta))
}

/// Adds the `oracle_importance` tensor `[L, H, T]` to an existing trace directory.
pub fn save_importance(importance: &ImportanceTensor, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut manifest = Manifest::read(dir)?;
    let values = importance.values();
    let dims = vec![values.num_layers(), values.num_heads(), values.len()];
    if dims != [manifest.shape.num_layers, manifest.shape.num_heads, manifest.shape.prefill_len] {
        return Err(Error::ShapeMismatch(format!(
            "importance dims {dims:?} do not match trace shape"
        )));
    }
    let data = values.as_slice().iter().map(|&v| v as f32).collect();
    let entry = write_tensor(dir, IMPORTANCE, &Tensor::new(dims, data)?)?;
    manifest.tensors.insert(IMPORTANCE.into(), entry);
    manifest
        .meta
        .insert(IMPORTANCE_NORM_KEY.into(), importance.normalization().as_str().into());
    manifest.write(dir)
}

pub fn load_importance(dir: impl AsRef<Path>) -> Result<ImportanceTensor> {
    let dir = dir.as_ref();
    let manifest = Manifest::read(dir)?;
    let entry = manifest.tensors.get(IMPORTANCE).ok_or_else(|| Error::Manifest {
        path: dir.join(MANIFEST_FILE),
        reason: format!("`{IMPORTANCE}` not declared"),
    })?;
    let tensor = read_tensor(dir, IMPORTANCE, entry)?;
    let dims = tensor.dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::ShapeMismatch(format!("{IMPORTANCE} dims {dims:?}")));
    }
    if let Some(i) = tensor.data().iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidValue {
            tensor: IMPORTANCE.into(),
            index: tensor.unravel(i),
            value: tensor.data()[i] as f64,
        });
    }
    let normalization = match manifest.meta.get(IMPORTANCE_NORM_KEY).map(String::as_str) {
        Some("intra_layer") => Normalization::IntraLayer,
        _ => Normalization::Raw,
    };
    let values = HeadValues::from_vec(
        dims[0],
        dims[1],
        dims[2],
        tensor.data().iter().map(|&v| v as f64).collect(),
    )?;
    Ok(ImportanceTensor::from_parts(values, normalization))
}

fn write_tensor(dir: &Path, name: &str, tensor: &Tensor) -> Result<TensorEntry> {
    let file = format!("{name}.f32");
    let path = dir.join(&file);
    let bytes: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorEntry {
        file,
        dims: tensor.dims().to_vec(),
        dtype: DTYPE.into(),
    })
}

fn read_tensor(dir: &Path, name: &str, entry: &TensorEntry) -> Result<Tensor> {
    if entry.dtype != DTYPE {
        return Err(Error::Manifest {
            path: dir.join(MANIFEST_FILE),
            reason: format!("tensor `{name}` has unsupported dtype `{}`", entry.dtype),
        });
    }
    let path = dir.join(&entry.file);
    if !path.is_file() {
        return Err(Error::MissingFile {
            tensor: name.into(),
            path,
        });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = entry.dims.iter().product::<usize>() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            tensor: name.into(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.dims.clone(), data)
}
