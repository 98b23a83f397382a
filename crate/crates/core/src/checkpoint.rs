//! Binary checkpoint format.
//!
//! ```text
//! "PTEE" | version: u32 LE | manifest_len: u32 LE | manifest (UTF-8 JSON)
//! then every array as little-endian f32, in manifest order, each starting
//! at a file offset that is a multiple of 8 (zero padding in between)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelGraph};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PTEE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 12;
const ALIGN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: ArrayRole,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub array_count: usize,
    pub arrays: Vec<ArrayEntry>,
    pub graph: ModelGraph,
    /// Free-form provenance (configs, seeds); must be deterministic.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

fn padded(offset: usize) -> usize {
    offset.div_ceil(ALIGN) * ALIGN
}

pub fn to_bytes(graph: &ModelGraph, params: &ParameterStore, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut data: Vec<&Tensor> = Vec::new();
    for (name, e) in params.params() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: e.tensor.shape().to_vec(),
            dtype: "f32".into(),
            role: ArrayRole::Param,
            frozen: e.frozen,
        });
        data.push(&e.tensor);
    }
    for (name, t) in params.buffers() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            role: ArrayRole::Buffer,
            frozen: false,
        });
        data.push(t);
    }
    let manifest = Manifest {
        array_count: arrays.len(),
        arrays,
        graph: graph.clone(),
        metadata,
    };
    let text = serde_json::to_vec(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    let len = u32::try_from(text.len()).map_err(|_| Error::Manifest("manifest exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + params.num_scalars() * 4 + 64);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&text);
    for t in data {
        out.resize(padded(out.len()), 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint image; returns the manifest and the arrays it lists.
pub fn from_bytes(bytes: &[u8]) -> Result<(Manifest, ParameterStore)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let text_end = HEADER_LEN + len;
    if bytes.len() < text_end {
        return Err(Error::TruncatedPayload {
            expected: text_end as u64,
            actual: bytes.len() as u64,
        });
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..text_end]).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.array_count != manifest.arrays.len() {
        return Err(Error::ManifestMismatch(format!(
            "array_count says {} but {} arrays are listed",
            manifest.array_count,
            manifest.arrays.len()
        )));
    }

    // lay out the payload before reading it so truncation is reported with
    // the full expected size
    let mut spans = Vec::with_capacity(manifest.arrays.len());
    let mut offset = text_end;
    for a in &manifest.arrays {
        if a.dtype != "f32" {
            return Err(Error::Manifest(format!("array `{}` has dtype {}, only f32 is supported", a.name, a.dtype)));
        }
        if a.shape.is_empty() || a.shape.contains(&0) {
            return Err(Error::Manifest(format!("array `{}` has invalid shape {:?}", a.name, a.shape)));
        }
        let start = padded(offset);
        let end = start + a.shape.iter().product::<usize>() * 4;
        spans.push((start, end));
        offset = end;
    }
    if bytes.len() < offset {
        return Err(Error::TruncatedPayload {
            expected: offset as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() > offset {
        return Err(Error::ManifestMismatch(format!(
            "{} bytes follow the last listed array",
            bytes.len() - offset
        )));
    }

    let mut store = ParameterStore::new();
    for (a, &(start, end)) in manifest.arrays.iter().zip(&spans) {
        let values = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(a.shape.clone(), values)?;
        let dup = match a.role {
            ArrayRole::Param => store.insert(a.name.clone(), t).and_then(|_| {
                store.entry_mut(&a.name)?.frozen = a.frozen;
                Ok(())
            }),
            ArrayRole::Buffer => store.insert_buffer(a.name.clone(), t),
        };
        dup.map_err(|e| Error::ManifestMismatch(e.to_string()))?;
    }
    Ok((manifest, store))
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, graph: &ModelGraph, params: &ParameterStore) -> Result<()> {
    save_checkpoint_with(path, graph, params, serde_json::Value::Null)
}

pub fn save_checkpoint_with(
    path: impl AsRef<Path>,
    graph: &ModelGraph,
    params: &ParameterStore,
    metadata: serde_json::Value,
) -> Result<()> {
    write_atomic(path.as_ref(), &to_bytes(graph, params, metadata)?)
}

/// Reads a checkpoint and checks its arrays against the graph it describes.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelGraph, ParameterStore)> {
    let (manifest, params) = load_checkpoint_with_metadata(path)?;
    Ok((manifest.graph, params))
}

pub fn load_checkpoint_with_metadata(path: impl AsRef<Path>) -> Result<(Manifest, ParameterStore)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, params) = from_bytes(&bytes)?;
    // the buffers ride along; Model::new checks every declared parameter
    let checked = Model::new(manifest.graph.clone(), params).map_err(|e| Error::ManifestMismatch(e.to_string()))?;
    Ok((manifest, checked.params))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let (graph, params) = load_checkpoint(path)?;
    Ok(Model { graph, params })
}
