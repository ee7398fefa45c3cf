//! Directory layout for frozen encoder weights.
//!
//! ```text
//! <dir>/manifest.json        {"format", "version", "dtype", "endianness", "config", "tensors": [...]}
//! <dir>/<name>.bin           raw row-major values, one file per tensor
//! ```
//!
//! Each tensor entry is `{"name", "shape": [rows, cols], "file"}`. Values are
//! little-endian `f64` or `f32` per `dtype`. Matrices are stored input-major
//! (`y = x · W`), so checkpoints from frameworks that store `out × in`
//! linear weights must be transposed by the converter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const WEIGHTS_FORMAT: &str = "kanoclip-weights";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: Dtype,
    endianness: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save_tensor_dir<C: Serialize>(dir: &Path, config: &C, tensors: &BTreeMap<String, Mat>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = m.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], file });
    }
    let manifest = Manifest {
        format: WEIGHTS_FORMAT.into(),
        version: WEIGHTS_VERSION,
        dtype: Dtype::F64,
        endianness: "little".into(),
        config: serde_json::to_value(config).map_err(|e| Error::WeightLoadFailure(e.to_string()))?,
        tensors: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::WeightLoadFailure(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_tensor_dir<C: for<'de> Deserialize<'de>>(dir: &Path) -> Result<(C, BTreeMap<String, Mat>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::WeightLoadFailure(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::WeightLoadFailure(format!("{}: {e}", path.display())))?;
    if manifest.format != WEIGHTS_FORMAT || manifest.version != WEIGHTS_VERSION {
        return Err(Error::WeightLoadFailure(format!(
            "unsupported weight format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.endianness != "little" {
        return Err(Error::WeightLoadFailure(format!("unsupported endianness {}", manifest.endianness)));
    }
    let config: C =
        serde_json::from_value(manifest.config).map_err(|e| Error::WeightLoadFailure(format!("config: {e}")))?;
    let mut tensors = BTreeMap::new();
    for entry in manifest.tensors {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::WeightLoadFailure(format!("{}: {e}", path.display())))?;
        let [rows, cols] = entry.shape;
        let values: Vec<f64> = match manifest.dtype {
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        };
        let width = match manifest.dtype {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        };
        if bytes.len() != rows * cols * width {
            return Err(Error::WeightLoadFailure(format!(
                "tensor {} has {} bytes, shape {rows}x{cols} needs {}",
                entry.name,
                bytes.len(),
                rows * cols * width
            )));
        }
        tensors.insert(entry.name, Mat::from_vec(rows, cols, values)?);
    }
    Ok((config, tensors))
}

/// Removes and returns a tensor, checking its shape.
pub(crate) fn take(tensors: &mut BTreeMap<String, Mat>, name: &str, rows: usize, cols: usize) -> Result<Mat> {
    let m = tensors.remove(name).ok_or_else(|| Error::WeightLoadFailure(format!("missing tensor `{name}`")))?;
    if m.shape() != (rows, cols) {
        return Err(Error::WeightLoadFailure(format!(
            "tensor `{name}` has shape {:?}, expected ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(m)
}
