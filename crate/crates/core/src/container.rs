//! Directory container: a JSON manifest plus one little-endian raw buffer per
//! tensor. Datasets store `f32`, checkpoints `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

fn file_name(name: &str, dtype: &str) -> Result<String> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) || name.starts_with('.') {
        return Err(Error::Format(format!("invalid tensor name {name:?}")));
    }
    Ok(format!("{name}.{dtype}"))
}

pub fn write_tensor<T: Real>(dir: &Path, name: &str, t: &Tensor<T>) -> Result<TensorEntry> {
    let file = file_name(name, T::DTYPE)?;
    let mut bytes = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    fs::write(dir.join(&file), bytes)?;
    Ok(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: T::DTYPE.to_string(), file })
}

pub fn read_tensor<T: Real>(dir: &Path, entry: &TensorEntry) -> Result<Tensor<T>> {
    if entry.dtype != T::DTYPE {
        return Err(Error::Format(format!("tensor {} has dtype {}, expected {}", entry.name, entry.dtype, T::DTYPE)));
    }
    if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
        return Err(Error::Format(format!("tensor file {:?} escapes the container", entry.file)));
    }
    let bytes = fs::read(dir.join(&entry.file))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * T::BYTES {
        return Err(Error::Format(format!(
            "tensor {}: {} bytes on disk, shape {:?} needs {}",
            entry.name,
            bytes.len(),
            entry.shape,
            n * T::BYTES
        )));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(&entry.shape, data).map_err(|e| Error::Format(format!("tensor {}: {e}", entry.name)))
}

pub fn write_manifest<M: Serialize>(dir: &Path, manifest: &M) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn read_manifest<M: DeserializeOwned>(dir: &Path) -> Result<M> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))
}

pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("container has no tensor named {name}")))
}
