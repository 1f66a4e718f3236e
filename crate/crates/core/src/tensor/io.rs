use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// JSON sidecar describing a raw tensor payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

/// `<stem>.bin` and `<stem>.json`; dots already in the stem are kept.
fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".bin"), with(".json"))
}

/// Writes `<stem>.bin` (little-endian `f32`, row-major) and `<stem>.json`.
pub fn write_tensor(stem: &Path, t: &Tensor) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(4 * t.numel());
    for &v in t.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    fs::write(&json, serde_json::to_string(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`].
pub fn read_tensor(stem: &Path) -> Result<Tensor> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: TensorHeader = serde_json::from_str(&text)?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(shape_err!(
            "{}: unsupported dtype/order {}/{}",
            json.display(),
            header.dtype,
            header.order
        ));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let numel: usize = header.shape.iter().product();
    if bytes.len() != 4 * numel {
        return Err(shape_err!(
            "{}: header declares shape {:?} ({numel} values) but payload has {} bytes",
            bin.display(),
            header.shape,
            bytes.len()
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(header.shape, data).map_err(|e| shape_err!("{}: {e}", bin.display()))
}
