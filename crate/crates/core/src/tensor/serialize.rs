//! Named tensors as a little-endian raw blob plus a text manifest.
//!
//! `<stem>.bin` holds the concatenated element bytes; `<stem>.manifest` has a
//! version line followed by one tab-separated line per tensor:
//!
//! ```text
//! tensor-manifest 1
//! backbone.conv0.weight	f32	64,3,3,3	0
//! backbone.conv0.bias	f32	64	6912
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn encode<T: Real>(tensors: &[(&str, &Tensor<T>)]) -> (Vec<u8>, String) {
    let mut blob = Vec::new();
    let mut manifest = format!("tensor-manifest {MANIFEST_VERSION}\n");
    for (name, t) in tensors {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            T::DTYPE,
            shape.join(","),
            blob.len()
        ));
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    (blob, manifest)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    match header.strip_prefix("tensor-manifest ") {
        Some(v) if v.trim() == MANIFEST_VERSION.to_string() => {}
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported manifest header {header:?}"),
            })
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format {
            offset: 0,
            message: format!("manifest line {}: {what}: {line:?}", lineno + 2),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let shape = fields[2]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset = fields[3].parse::<u64>().map_err(|_| bad("bad offset"))?;
        entries.push(ManifestEntry {
            name: fields[0].to_string(),
            dtype: fields[1].to_string(),
            shape,
            offset,
        });
    }
    Ok(entries)
}

pub fn decode<T: Real>(blob: &[u8], manifest: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for e in parse_manifest(manifest)? {
        if e.dtype != T::DTYPE {
            return Err(Error::Format {
                offset: e.offset,
                message: format!("tensor {} has dtype {}, expected {}", e.name, e.dtype, T::DTYPE),
            });
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * T::BYTES;
        if end > blob.len() {
            return Err(Error::Format {
                offset: blob.len() as u64,
                message: format!("tensor {} runs past the end of the blob", e.name),
            });
        }
        let data = blob[start..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save<T: Real>(stem: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let (blob, manifest) = encode(tensors);
    let bin = blob_path(stem);
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let man = manifest_path(stem);
    fs::write(&man, manifest).map_err(|e| Error::io(&man, e))?;
    Ok(())
}

pub fn load<T: Real>(stem: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bin = blob_path(stem);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let man = manifest_path(stem);
    let manifest = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    decode(&blob, &manifest)
}
