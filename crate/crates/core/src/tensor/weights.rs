//! Weight files: a JSON manifest plus a flat little-endian blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Slot, Tensor, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<WeightEntry>,
}

/// Writes every tensor `model` exposes (parameters and buffers) to
/// `<stem>.json` + `<stem>.bin`.
pub fn save_weights<T: Real>(model: &mut dyn Visit<T>, dir: &Path, stem: &str) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    model.visit("", &mut |name, slot| {
        let t: &Tensor<T> = match slot {
            Slot::Param(p) => &p.value,
            Slot::Buffer(b) => b,
        };
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        tensors.push(WeightEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    });
    save_manifest(dir, stem, T::DTYPE, &tensors, &blob)
}

pub(crate) fn save_manifest(
    dir: &Path,
    stem: &str,
    dtype: &str,
    tensors: &[WeightEntry],
    blob: &[u8],
) -> Result<()> {
    let manifest = WeightManifest {
        dtype: dtype.to_string(),
        blob: format!("{stem}.bin"),
        tensors: tensors.to_vec(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let bin_path = dir.join(&manifest.blob);
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub(crate) fn read_manifest(dir: &Path, stem: &str) -> Result<(WeightManifest, Vec<u8>)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: WeightManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
    let bin_path = dir.join(&manifest.blob);
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    for t in &manifest.tensors {
        if t.offset + t.bytes > blob.len() {
            return Err(Error::format(
                &bin_path,
                format!("tensor {} overruns the blob", t.name),
            ));
        }
    }
    Ok((manifest, blob))
}

pub(crate) fn decode_entry<T: Real>(
    path: &Path,
    dtype: &str,
    entry: &WeightEntry,
    blob: &[u8],
) -> Result<Vec<T>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::format(path, format!("unknown dtype {other}"))),
    };
    let count: usize = entry.shape.iter().product();
    if count * width != entry.bytes {
        return Err(Error::format(
            path,
            format!("{}: {} bytes for shape {:?}", entry.name, entry.bytes, entry.shape),
        ));
    }
    let raw = &blob[entry.offset..entry.offset + entry.bytes];
    Ok(raw
        .chunks(width)
        .map(|c| match width {
            4 => T::of(f32::read_le(c) as f64),
            _ => T::of(f64::read_le(c)),
        })
        .collect())
}

/// Loads weights into `model`, validating that every tensor the model
/// exposes is present with the same shape.
pub fn load_weights<T: Real>(model: &mut dyn Visit<T>, dir: &Path, stem: &str) -> Result<()> {
    let (manifest, blob) = read_manifest(dir, stem)?;
    let path = dir.join(format!("{stem}.json"));
    let index: std::collections::HashMap<&str, &WeightEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut failure: Option<Error> = None;
    let mut seen = 0usize;
    model.visit("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let target: &mut Tensor<T> = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        let Some(entry) = index.get(name) else {
            failure = Some(Error::format(&path, format!("missing tensor {name}")));
            return;
        };
        if entry.shape != target.shape() {
            failure = Some(Error::format(
                &path,
                format!(
                    "tensor {name}: file shape {:?}, model expects {:?}",
                    entry.shape,
                    target.shape()
                ),
            ));
            return;
        }
        match decode_entry::<T>(&path, &manifest.dtype, entry, &blob) {
            Ok(values) => {
                target.data_mut().copy_from_slice(&values);
                seen += 1;
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if seen != manifest.tensors.len() {
        return Err(Error::format(
            &path,
            format!("{} tensors in file, model uses {seen}", manifest.tensors.len()),
        ));
    }
    Ok(())
}
