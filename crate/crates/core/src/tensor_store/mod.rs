//! Read-only access to safetensors checkpoints.
//!
//! A checkpoint is either a single `*.safetensors` file or a set of shards
//! listed by a `*.safetensors.index.json` whose `weight_map` maps tensor
//! names to shard file names. Opening a checkpoint parses every header but
//! reads no payload bytes; statistics are computed later by streaming the
//! payload in fixed-size chunks.

mod dtype;
mod header;
mod reduce;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dtype::{decode_element, DType};
pub use header::{parse_header, MAX_HEADER_BYTES};
pub use reduce::{tensor_stats, tensor_std, tensor_values, CHUNK_BYTES};
pub use stats::StreamStats;

use crate::error::{Error, Result};

/// Half-open range of rows (first dimension) of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowRange {
    pub start: usize,
    pub end: usize,
}

impl RowRange {
    pub fn new(start: usize, end: usize) -> Self {
        RowRange { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Location of one named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHandle {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Offsets relative to the start of the shard's data region.
    pub byte_range: (u64, u64),
    /// Index into [`CheckpointHandle::shards`].
    pub shard: usize,
}

impl TensorHandle {
    pub fn element_count(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn byte_len(&self) -> u64 {
        self.byte_range.1 - self.byte_range.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub path: PathBuf,
    /// Absolute file offset of the data region (8 + header length).
    pub data_start: u64,
    pub file_len: u64,
}

/// Parsed headers of every shard in a checkpoint. Immutable once opened.
#[derive(Debug, Clone)]
pub struct CheckpointHandle {
    root: PathBuf,
    shards: Vec<Shard>,
    tensors: BTreeMap<String, TensorHandle>,
    total_bytes: u64,
}

impl CheckpointHandle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorHandle> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorHandle> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::TensorNotFound(name.to_string()))
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    /// Paths of the shard files, in shard-id order.
    pub fn files(&self) -> Vec<PathBuf> {
        self.shards.iter().map(|s| s.path.clone()).collect()
    }
}

#[derive(Deserialize)]
struct ShardIndex {
    weight_map: BTreeMap<String, String>,
}

const INDEX_SUFFIX: &str = ".safetensors.index.json";

/// Opens a checkpoint directory (or a single `.safetensors` / index file).
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    let path = path.as_ref();
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        return if name.ends_with(INDEX_SUFFIX) {
            open_sharded(&root, path)
        } else {
            open_shards(&root, vec![path.to_path_buf()])
        };
    }

    let mut indexes = Vec::new();
    let mut singles = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
            continue;
        };
        if name.ends_with(INDEX_SUFFIX) {
            indexes.push(entry.path());
        } else if name.ends_with(".safetensors") {
            singles.push(entry.path());
        }
    }
    indexes.sort();
    singles.sort();

    match indexes.len() {
        0 => {}
        1 => return open_sharded(path, &indexes[0]),
        _ => {
            let preferred = path.join("model.safetensors.index.json");
            if indexes.contains(&preferred) {
                return open_sharded(path, &preferred);
            }
            return Err(Error::MissingIndex {
                path: path.to_path_buf(),
                reason: format!("{} shard indexes and none is model{INDEX_SUFFIX}", indexes.len()),
            });
        }
    }
    match singles.len() {
        0 => Err(Error::MissingIndex {
            path: path.to_path_buf(),
            reason: "neither a .safetensors file nor a shard index".into(),
        }),
        1 => open_shards(path, singles),
        n => Err(Error::MissingIndex {
            path: path.to_path_buf(),
            reason: format!("{n} .safetensors files but no shard index"),
        }),
    }
}

fn open_sharded(root: &Path, index_path: &Path) -> Result<CheckpointHandle> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: ShardIndex = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(index_path.display().to_string(), e.to_string()))?;

    let files: BTreeSet<&String> = index.weight_map.values().collect();
    let mut shard_paths = Vec::with_capacity(files.len());
    for file in files {
        let p = root.join(file);
        if !p.is_file() {
            return Err(Error::MissingIndex {
                path: root.to_path_buf(),
                reason: format!("index references missing shard {file:?}"),
            });
        }
        shard_paths.push(p);
    }
    let ckpt = open_shards(root, shard_paths)?;

    for (name, file) in &index.weight_map {
        let located = ckpt.tensors.get(name).map(|h| &ckpt.shards[h.shard].path);
        if located != Some(&root.join(file)) {
            return Err(Error::malformed(
                index_path.display().to_string(),
                format!("weight_map places {name:?} in {file:?} but that shard does not contain it"),
            ));
        }
    }
    Ok(ckpt)
}

fn open_shards(root: &Path, shard_paths: Vec<PathBuf>) -> Result<CheckpointHandle> {
    let mut shards = Vec::with_capacity(shard_paths.len());
    let mut tensors: BTreeMap<String, TensorHandle> = BTreeMap::new();
    let mut total_bytes = 0;

    for (shard_id, path) in shard_paths.into_iter().enumerate() {
        let context = path.display().to_string();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut prefix = [0u8; 8];
        file.read_exact(&mut prefix)
            .map_err(|_| Error::malformed(&context, "file shorter than the 8-byte length prefix"))?;
        let header_len = header::header_len(&prefix, &context)?;
        if 8 + header_len > file_len {
            return Err(Error::malformed(
                &context,
                format!("declared header length {header_len} runs past end of file ({file_len} bytes)"),
            ));
        }
        let mut buf = prefix.to_vec();
        buf.resize(8 + header_len as usize, 0);
        file.read_exact(&mut buf[8..]).map_err(|e| Error::io(&path, e))?;

        let data_start = 8 + header_len;
        let parsed = header::parse_header_in(&buf, &context, shard_id)?;
        for (name, handle) in parsed {
            if handle.byte_range.1 > file_len - data_start {
                return Err(Error::malformed(
                    &context,
                    format!("tensor {name:?} extends past end of file"),
                ));
            }
            if let Some(prev) = tensors.get(&name) {
                return Err(Error::DuplicateTensor {
                    name,
                    first: shards
                        .get(prev.shard)
                        .map(|s: &Shard| s.path.display().to_string())
                        .unwrap_or_default(),
                    second: context,
                });
            }
            tensors.insert(name, handle);
        }
        total_bytes += file_len;
        shards.push(Shard {
            path,
            data_start,
            file_len,
        });
    }

    Ok(CheckpointHandle {
        root: root.to_path_buf(),
        shards,
        tensors,
        total_bytes,
    })
}
