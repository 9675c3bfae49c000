use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Single-file checkpoint: u64 little-endian manifest length, the JSON
/// manifest, then all parameter values as little-endian f64 in manifest order.
pub fn write_checkpoint(
    path: &Path,
    meta: serde_json::Value,
    params: &[(String, &Tensor)],
) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        meta,
        params: params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    for (_, tensor) in params {
        for v in tensor.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    let mut buf = [0u8; 8];
    for entry in manifest.params {
        let len: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            file.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        params.push((entry.name, Tensor::new(entry.shape, values)?));
    }
    Ok((manifest.meta, params))
}
