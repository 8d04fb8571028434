//! Single-file array container: one line of JSON manifest, then the arrays
//! as little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_view<T: Real>(name: impl Into<String>, view: ArrayViewD<'_, T>) -> Self {
        NamedArray {
            name: name.into(),
            shape: view.shape().to_vec(),
            data: view.iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_array<T: Real>(&self) -> ArrayD<T> {
        ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
        )
        .expect("manifest shape matches data")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    meta: serde_json::Value,
    arrays: &[NamedArray],
) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        arrays: arrays
            .iter()
            .map(|a| ArrayEntry {
                name: a.name.clone(),
                shape: a.shape.clone(),
            })
            .collect(),
        meta,
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    for array in arrays {
        bytes.reserve(array.data.len() * 4);
        for v in &array.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<NamedArray>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing manifest line", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {} / {}",
            path.display(),
            manifest.format_version,
            manifest.dtype
        )));
    }
    let mut body = &bytes[split + 1..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in manifest.arrays {
        let len: usize = entry.shape.iter().product();
        if body.len() < len * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at `{}`",
                path.display(),
                entry.name
            )));
        }
        let (chunk, rest) = body.split_at(len * 4);
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push(NamedArray {
            name: entry.name,
            shape: entry.shape,
            data,
        });
        body = rest;
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            body.len()
        )));
    }
    Ok((manifest.meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let arrays = vec![
            NamedArray {
                name: "a".into(),
                shape: vec![2, 2],
                data: vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7],
            },
            NamedArray {
                name: "b".into(),
                shape: vec![3],
                data: vec![0.1, 0.2, 0.3],
            },
        ];
        write_checkpoint(&path, serde_json::json!({"k": 1}), &arrays).unwrap();
        let (meta, back) = read_checkpoint(&path).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back.len(), 2);
        for (x, y) in arrays.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let arrays = vec![NamedArray {
            name: "a".into(),
            shape: vec![4],
            data: vec![1.0; 4],
        }];
        write_checkpoint(&path, serde_json::Value::Null, &arrays).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
