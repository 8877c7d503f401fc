//! Named-parameter storage and the on-disk weight archive.
//!
//! An archive is a directory holding `index.json` and one raw blob file.
//! The index maps each name to `{dtype, shape, file, byte_offset, byte_len}`;
//! blobs are little-endian `f32`, channel-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "params.bin";

/// Expected name → shape of every array in an archive.
pub type ParamSchema = BTreeMap<String, Vec<usize>>;

/// An ordered set of named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.entries.get(name)
    }

    pub fn expect(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` is {:?}, new value {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Tensor>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn schema(&self) -> ParamSchema {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Arc<Tensor>)> {
        self.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Round every value to `f32` precision, the archive storage precision.
    pub fn round_to_f32(&mut self) {
        for v in self.entries.values_mut() {
            let t = Tensor::new(
                v.shape().to_vec(),
                v.data().iter().map(|&x| x as f32 as f64).collect(),
            )
            .expect("same shape");
            *v = Arc::new(t);
        }
    }

    /// Merge `other` in, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

fn archive_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write `store` to `dir` (created if needed).
pub fn save_weight_archive(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut index = BTreeMap::new();
    for (name, value) in store.iter() {
        let offset = blob.len() as u64;
        for &v in value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        index.insert(
            name.to_string(),
            IndexEntry {
                dtype: "f32".into(),
                shape: value.shape().to_vec(),
                file: BLOB_FILE.into(),
                byte_offset: offset,
                byte_len: blob.len() as u64 - offset,
            },
        );
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index).map_err(|source| Error::Json {
        path: index_path.clone(),
        source,
    })?;
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
}

/// Read every array in an archive without checking it against a schema.
pub fn read_weight_archive(dir: &Path) -> Result<ParamStore> {
    let index_path = dir.join(INDEX_FILE);
    let raw = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&raw)
        .map_err(|e| archive_err(dir, format!("corrupt index: {e}")))?;

    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut store = ParamStore::new();
    for (name, entry) in &index {
        if entry.dtype != "f32" {
            return Err(archive_err(
                dir,
                format!("array `{name}` has unsupported dtype {}", entry.dtype),
            ));
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_len != 4 * count as u64 {
            return Err(archive_err(
                dir,
                format!(
                    "array `{name}`: shape {:?} needs {} bytes, index says {}",
                    entry.shape,
                    4 * count,
                    entry.byte_len
                ),
            ));
        }
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file == ".." {
            return Err(archive_err(dir, format!("array `{name}`: bad file name")));
        }
        if !blobs.contains_key(&entry.file) {
            let p: PathBuf = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let bytes = &blobs[&entry.file];
        let end = entry.byte_offset + entry.byte_len;
        if end > bytes.len() as u64 {
            return Err(archive_err(
                dir,
                format!(
                    "array `{name}` spans bytes {}..{end} but {} holds {} (truncated)",
                    entry.byte_offset,
                    entry.file,
                    bytes.len()
                ),
            ));
        }
        let data = bytes[entry.byte_offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(store)
}

/// Load an archive and validate it against `schema`: every expected name
/// present with its exact shape, and no unknown names.
pub fn load_weight_archive(dir: &Path, schema: &ParamSchema) -> Result<ParamStore> {
    let store = read_weight_archive(dir)?;
    for name in store.names() {
        if !schema.contains_key(name) {
            return Err(archive_err(dir, format!("unknown array `{name}`")));
        }
    }
    for (name, shape) in schema {
        let value = store
            .get(name)
            .ok_or_else(|| archive_err(dir, format!("missing required array `{name}`")))?;
        if value.shape() != shape.as_slice() {
            return Err(archive_err(
                dir,
                format!(
                    "array `{name}` has shape {:?}, expected {shape:?}",
                    value.shape()
                ),
            ));
        }
    }
    Ok(store)
}
