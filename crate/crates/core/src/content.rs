//! Heterogeneous content aggregation.
//!
//! For every node type, each attribute's raw embeddings are stacked in RWR
//! rank order, projected to the unified dimension, contextualised with
//! multi-head self-attention across same-type nodes and finally averaged
//! over attributes. The target news node is encoded on its own.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embstore::{AttributeKey, EmbeddingTable, FeatureStore};
use crate::error::ModelError;
use crate::graph::{HetGraph, NodeId, NodeType};
use crate::nn::MultiHeadAttention;
use crate::tensor::{ParamId, ParamInit, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentConfig {
    pub unified_dim: usize,
    pub heads: usize,
    #[serde(default = "default_layers")]
    pub attention_layers: usize,
    /// Attribute list per node type; each entry is `q_k` attributes long.
    pub attributes: BTreeMap<NodeType, Vec<AttributeSpec>>,
    /// One attention stack per attribute instead of one per node type.
    #[serde(default)]
    pub per_attribute_blocks: bool,
}

fn default_layers() -> usize {
    1
}

impl ContentConfig {
    /// Declares every table present in `features`.
    pub fn from_features(features: &FeatureStore, unified_dim: usize, heads: usize) -> Self {
        let attributes = NodeType::ALL
            .into_iter()
            .map(|t| {
                let specs = features
                    .attributes_of(t)
                    .into_iter()
                    .map(|(name, dim)| AttributeSpec { name, dim })
                    .collect();
                (t, specs)
            })
            .collect();
        ContentConfig {
            unified_dim,
            heads,
            attention_layers: 1,
            attributes,
            per_attribute_blocks: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.unified_dim == 0 || self.heads == 0 || !self.unified_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "unified_dim {} must be a positive multiple of heads {}",
                self.unified_dim, self.heads
            )));
        }
        for t in NodeType::ALL {
            let attrs = self.attributes.get(&t).map_or(&[][..], Vec::as_slice);
            if attrs.is_empty() {
                return Err(ModelError::InvalidConfig(format!("node type {t} declares no attributes")));
            }
            if let Some(a) = attrs.iter().find(|a| a.dim == 0) {
                return Err(ModelError::InvalidConfig(format!("attribute {t}.{} has dim 0", a.name)));
            }
        }
        Ok(())
    }

    fn attrs(&self, t: NodeType) -> &[AttributeSpec] {
        self.attributes.get(&t).map_or(&[][..], Vec::as_slice)
    }
}

/// Stacks one attribute's embeddings of `nodes`, in order, into an
/// `m x dim` matrix. Nodes without a stored vector get a zero row and a
/// `false` present bit.
pub fn stack_attribute<T: Real>(
    nodes: &[NodeId],
    table: Option<&EmbeddingTable>,
    key: &AttributeKey,
    dim: usize,
) -> Result<(Tensor<T>, Vec<bool>), ModelError> {
    if let Some(t) = table {
        if t.dim() != dim {
            return Err(ModelError::DimMismatch {
                key: key.to_string(),
                expected: dim,
                actual: t.dim(),
            });
        }
    }
    let mut data = Vec::with_capacity(nodes.len() * dim);
    let mut present = Vec::with_capacity(nodes.len());
    for &id in nodes {
        match table.and_then(|t| t.lookup(id)) {
            Some(row) => {
                data.extend(row.iter().map(|&x| T::of(x as f64)));
                present.push(true);
            }
            None => {
                data.extend(std::iter::repeat_n(T::zero(), dim));
                present.push(false);
            }
        }
    }
    Ok((Tensor::matrix(nodes.len(), dim, data)?, present))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum BlockOwner {
    Type(NodeType),
    Attribute(NodeType, usize),
}

#[derive(Clone, Debug)]
pub struct ContentAggregator {
    cfg: ContentConfig,
    projections: HashMap<(NodeType, usize), ParamId>,
    blocks: HashMap<BlockOwner, Vec<MultiHeadAttention>>,
}

impl ContentAggregator {
    pub fn new<T: Real>(cfg: ContentConfig, store: &mut ParamStore<T>, init: &ParamInit) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.unified_dim;
        let mut projections = HashMap::new();
        let mut blocks = HashMap::new();
        for t in NodeType::ALL {
            for (i, attr) in cfg.attrs(t).iter().enumerate() {
                let name = format!("proj.{t}.{}", attr.name);
                // d x d_ik, applied as Q M^T
                let id = store.insert(&name, init.xavier(&name, d, attr.dim))?;
                projections.insert((t, i), id);
            }
            let owners: Vec<(BlockOwner, String)> = if cfg.per_attribute_blocks {
                cfg.attrs(t)
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (BlockOwner::Attribute(t, i), format!("attn.{t}.{}", a.name)))
                    .collect()
            } else {
                vec![(BlockOwner::Type(t), format!("attn.{t}"))]
            };
            for (owner, prefix) in owners {
                let stack = (0..cfg.attention_layers)
                    .map(|j| MultiHeadAttention::new(store, init, &format!("{prefix}.layer{j}"), d, cfg.heads))
                    .collect::<Result<Vec<_>, _>>()?;
                blocks.insert(owner, stack);
            }
        }
        Ok(ContentAggregator {
            cfg,
            projections,
            blocks,
        })
    }

    pub fn config(&self) -> &ContentConfig {
        &self.cfg
    }

    pub fn unified_dim(&self) -> usize {
        self.cfg.unified_dim
    }

    /// `Q' = Q M^T`, mapping `m x d_ik` to `m x d`.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        node_type: NodeType,
        attr: usize,
        stacked: Var,
    ) -> Result<Var, ModelError> {
        let m = tape.param(store, self.projections[&(node_type, attr)])?;
        let mt = tape.transpose(m)?;
        Ok(tape.matmul(stacked, mt)?)
    }

    fn stack_for(&self, node_type: NodeType, attr: usize) -> &[MultiHeadAttention] {
        let owner = if self.cfg.per_attribute_blocks {
            BlockOwner::Attribute(node_type, attr)
        } else {
            BlockOwner::Type(node_type)
        };
        &self.blocks[&owner]
    }

    /// Self-attention (`Q = K = V = x`) through the node type's block stack.
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        node_type: NodeType,
        attr: usize,
        x: Var,
    ) -> Result<Var, ModelError> {
        Ok(self.attend_with_weights(tape, store, node_type, attr, x)?.0)
    }

    /// Like [`attend`](Self::attend), also returning every layer's per-head
    /// attention weights.
    pub fn attend_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        node_type: NodeType,
        attr: usize,
        x: Var,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let mut h = x;
        let mut all = Vec::new();
        for block in self.stack_for(node_type, attr) {
            let (out, w) = block.forward_with_weights(tape, store, h, h, None)?;
            all.extend(w);
            h = out;
        }
        Ok((h, all))
    }

    /// Elementwise mean over per-attribute outputs.
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>, parts: &[Var]) -> Result<Var, ModelError> {
        Ok(tape.mean_of(parts)?)
    }

    /// Representations of `nodes` (all of `node_type`, in rank order): `m x d`.
    pub fn encode_nodes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &FeatureStore,
        node_type: NodeType,
        nodes: &[NodeId],
    ) -> Result<Var, ModelError> {
        if nodes.is_empty() {
            return Ok(tape.zeros(0, self.cfg.unified_dim)?);
        }
        let mut parts = Vec::with_capacity(self.cfg.attrs(node_type).len());
        for (i, attr) in self.cfg.attrs(node_type).iter().enumerate() {
            let key = AttributeKey::new(node_type, attr.name.clone());
            let (q, _present) = stack_attribute::<T>(nodes, features.get(&key), &key, attr.dim)?;
            let q = tape.constant(q)?;
            let projected = self.project(tape, store, node_type, i, q)?;
            parts.push(self.attend(tape, store, node_type, i, projected)?);
        }
        self.fuse(tape, &parts)
    }

    /// Representation of the target news node alone: `1 x d`.
    pub fn encode_target<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &HetGraph,
        features: &FeatureStore,
        news: NodeId,
    ) -> Result<Var, ModelError> {
        if graph.node_type(news) != Some(NodeType::News) {
            return Err(ModelError::NotANewsNode(news));
        }
        self.encode_nodes(tape, store, features, NodeType::News, &[news])
    }
}
