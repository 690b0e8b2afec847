//! Named parameter blocks and the checkpoint format.
//!
//! A checkpoint is a JSON manifest (model config plus a block table of
//! names, shapes and offsets) next to a flat binary of little-endian f64
//! values with the same stem and a `.bin` extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter block {name:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "param",
                detail: format!("{name}: shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        let id = self.blocks.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.id(name).map(|i| &self.blocks[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        self.id(name).map(|i| &mut self.blocks[i])
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }
}

/// Adds blocks to a store with seeded initial values.
pub struct Initializer<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Initializer<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.store.add(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.store.add(name, shape, vec![value; n])
    }

    /// Glorot-uniform weight.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn linear(&mut self, prefix: &str, cin: usize, cout: usize, bias: bool) -> Result<()> {
        self.xavier(&format!("{prefix}.w"), &[cin, cout], cin, cout)?;
        if bias {
            self.constant(&format!("{prefix}.b"), &[cout], 0.0)?;
        }
        Ok(())
    }

    pub fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize, bias: bool) -> Result<()> {
        self.xavier(&format!("{prefix}.w"), &[k, k, cin, cout], k * k * cin, k * k * cout)?;
        if bias {
            self.constant(&format!("{prefix}.b"), &[cout], 0.0)?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.constant(&format!("{prefix}.g"), &[c], 1.0)?;
        self.constant(&format!("{prefix}.b"), &[c], 0.0)?;
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "satmap-ckpt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the binary, in f64 values.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: serde_json::Value,
    pub data_file: String,
    pub total: usize,
    pub blocks: Vec<BlockEntry>,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// The binary file that belongs to a manifest path.
pub fn data_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let bin = data_path(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Checkpoint {
            path: parent.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    let mut blocks = Vec::with_capacity(store.blocks().len());
    let mut bytes = Vec::with_capacity(store.numel() * 8);
    let mut offset = 0;
    for b in store.blocks() {
        blocks.push(BlockEntry {
            name: b.name.clone(),
            shape: b.shape.clone(),
            offset,
            len: b.data.len(),
        });
        offset += b.data.len();
        for v in &b.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.to_string(),
        config,
        data_file: bin.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        total: offset,
        blocks,
    };
    std::fs::write(&bin, bytes).map_err(|e| ckpt_err(&bin, e.to_string()))?;
    satmap_core::io::write_json(path, &manifest)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest: CheckpointManifest = satmap_core::io::read_json(path)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, format!("unknown format {:?}", manifest.format)));
    }
    let bin = path.with_file_name(&manifest.data_file);
    let bytes = std::fs::read(&bin).map_err(|e| ckpt_err(&bin, e.to_string()))?;
    if bytes.len() != manifest.total * 8 {
        return Err(ckpt_err(&bin, format!("expected {} bytes, found {}", manifest.total * 8, bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut store = ParamStore::new();
    for b in &manifest.blocks {
        if b.offset + b.len > values.len() {
            return Err(ckpt_err(path, format!("block {} runs past the data", b.name)));
        }
        store.add(&b.name, &b.shape, values[b.offset..b.offset + b.len].to_vec())?;
    }
    Ok((store, manifest.config))
}
