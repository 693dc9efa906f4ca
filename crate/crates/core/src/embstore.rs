//! Precomputed per-node attribute embeddings and the `HETEMB1` file format.
//!
//! Layout (little-endian): magic `HETEMB1\0`, u32 count, u32 dim, then
//! `count` records of `[u64 node_id, dim x f32]` sorted by node id.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, NodeType};

pub const EMB_MAGIC: &[u8; 8] = b"HETEMB1\0";
pub const EMB_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EmbError {
    #[error("bad magic, not a HETEMB1 file")]
    BadMagic,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite value in row for node {0}")]
    NonFiniteValue(NodeId),
    #[error("file truncated: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("records not sorted ascending at node {0}")]
    Unsorted(NodeId),
    #[error("dimension must be positive")]
    ZeroDim,
    #[error("duplicate attribute {0}")]
    DuplicateAttribute(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identifies one attribute type of one node type.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributeKey {
    pub node_type: NodeType,
    pub attr_name: String,
}

impl AttributeKey {
    pub fn new(node_type: NodeType, attr_name: impl Into<String>) -> Self {
        AttributeKey {
            node_type,
            attr_name: attr_name.into(),
        }
    }

    /// File name used inside an embedding directory, e.g. `news.text.hetemb`.
    pub fn file_name(&self) -> String {
        format!("{}.{}.hetemb", self.node_type, self.attr_name)
    }
}

impl std::fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.node_type, self.attr_name)
    }
}

/// Fixed-dimension f32 vectors keyed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<NodeId, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self, EmbError> {
        if dim == 0 {
            return Err(EmbError::ZeroDim);
        }
        Ok(EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, id: NodeId, vector: Vec<f32>) -> Result<(), EmbError> {
        if vector.len() != self.dim {
            return Err(EmbError::DimMismatch {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbError::NonFiniteValue(id));
        }
        self.rows.insert(id, vector);
        Ok(())
    }

    /// The stored vector, or `None` when the node has no embedding.
    pub fn lookup(&self, id: NodeId) -> Option<&[f32]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f32])> {
        self.rows.iter().map(|(&id, v)| (id, v.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMB_HEADER_LEN + self.rows.len() * (8 + 4 * self.dim));
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, row) in &self.rows {
            out.extend_from_slice(&id.0.to_le_bytes());
            for x in row {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbError> {
        if bytes.len() < 8 || &bytes[..8] != EMB_MAGIC {
            return Err(EmbError::BadMagic);
        }
        if bytes.len() < EMB_HEADER_LEN {
            return Err(EmbError::TruncatedFile {
                expected: EMB_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let record = 8 + 4 * dim;
        let expected = EMB_HEADER_LEN + count * record;
        if bytes.len() < expected {
            return Err(EmbError::TruncatedFile {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            // trailing bytes mean the declared dim disagrees with the payload
            let actual = (bytes.len() - EMB_HEADER_LEN).checked_div(count).map_or(0, |r| (r - 8) / 4);
            return Err(EmbError::DimMismatch { expected: dim, actual });
        }
        let mut table = EmbeddingTable::new(dim)?;
        let mut prev: Option<NodeId> = None;
        for chunk in bytes[EMB_HEADER_LEN..].chunks_exact(record) {
            let id = NodeId(u64::from_le_bytes(chunk[..8].try_into().unwrap()));
            if prev.is_some_and(|p| p >= id) {
                return Err(EmbError::Unsorted(id));
            }
            prev = Some(id);
            let row: Vec<f32> = chunk[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            table.insert(id, row)?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, EmbError> {
        EmbeddingTable::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), EmbError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }
}

/// All embedding tables of a dataset, one per attribute key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    tables: BTreeMap<AttributeKey, EmbeddingTable>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: AttributeKey, table: EmbeddingTable) -> Result<(), EmbError> {
        if self.tables.contains_key(&key) {
            return Err(EmbError::DuplicateAttribute(key.to_string()));
        }
        self.tables.insert(key, table);
        Ok(())
    }

    pub fn get(&self, key: &AttributeKey) -> Option<&EmbeddingTable> {
        self.tables.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &AttributeKey> {
        self.tables.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AttributeKey, &EmbeddingTable)> {
        self.tables.iter()
    }

    /// Attribute names and dims declared for one node type, in name order.
    pub fn attributes_of(&self, node_type: NodeType) -> Vec<(String, usize)> {
        self.tables
            .iter()
            .filter(|(k, _)| k.node_type == node_type)
            .map(|(k, t)| (k.attr_name.clone(), t.dim()))
            .collect()
    }

    /// Loads every `<type>.<attr>.hetemb` file in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, EmbError> {
        let mut store = FeatureStore::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "hetemb"))
            .collect();
        paths.sort();
        for path in paths {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some((ty, attr)) = stem.split_once('.') else {
                continue;
            };
            let Ok(node_type) = ty.parse::<NodeType>() else {
                continue;
            };
            store.insert(AttributeKey::new(node_type, attr), EmbeddingTable::load(&path)?)?;
        }
        Ok(store)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), EmbError> {
        fs::create_dir_all(dir)?;
        for (key, table) in &self.tables {
            table.write(&dir.join(key.file_name()))?;
        }
        Ok(())
    }
}
