//! Random walk with restart from each news root.
//!
//! Every iteration first restarts at the root with probability `restart_p`,
//! then moves to a uniformly chosen neighbor of the current node and records
//! it. After `iterations` steps the most frequently recorded nodes (excluding
//! the root itself) are kept, ranked by frequency.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{HetGraph, NodeId, NodeType};

pub const RWR_MAGIC: &[u8; 8] = b"HETRWR1\0";

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("node {0} is not a news node")]
    NotANewsNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} has no neighbors")]
    NoNeighbors(NodeId),
    #[error("invalid walk config: {0}")]
    InvalidConfig(String),
    #[error("bad magic, not a HETRWR1 file")]
    BadMagic,
    #[error("cache file truncated")]
    Truncated,
    #[error("cache file has unknown node type code {0}")]
    BadNodeType(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub restart_p: f64,
    pub iterations: usize,
    pub top_gamma: usize,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            restart_p: 0.5,
            iterations: 10_000,
            top_gamma: 15,
            seed: 42,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(0.0..=1.0).contains(&self.restart_p) {
            return Err(SampleError::InvalidConfig(format!(
                "restart_p {} outside [0, 1]",
                self.restart_p
            )));
        }
        if self.iterations == 0 {
            return Err(SampleError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.top_gamma == 0 || self.top_gamma > u16::MAX as usize {
            return Err(SampleError::InvalidConfig(format!(
                "top_gamma {} outside [1, 65535]",
                self.top_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedNeighbor {
    pub id: NodeId,
    pub node_type: NodeType,
    pub frequency: u32,
}

/// Top-ranked RWR neighbors of one news root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSample {
    pub root: NodeId,
    pub ranked: Vec<RankedNeighbor>,
}

impl NeighborSample {
    pub fn empty(root: NodeId) -> Self {
        NeighborSample {
            root,
            ranked: Vec::new(),
        }
    }

    /// Total number of neighbors `l`.
    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    /// Neighbors of one type, in rank order.
    pub fn partition(&self, node_type: NodeType) -> Vec<NodeId> {
        self.ranked
            .iter()
            .filter(|r| r.node_type == node_type)
            .map(|r| r.id)
            .collect()
    }

    /// (m_n, m_p, m_u)
    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |t| self.ranked.iter().filter(|r| r.node_type == t).count();
        (count(NodeType::News), count(NodeType::Post), count(NodeType::User))
    }

    /// Keeps only the first `gamma` ranked neighbors.
    pub fn truncated(&self, gamma: usize) -> NeighborSample {
        NeighborSample {
            root: self.root,
            ranked: self.ranked.iter().take(gamma).copied().collect(),
        }
    }
}

/// Per-node visit counts with the iteration of the first visit.
#[derive(Clone, Debug, Default)]
pub struct VisitTally {
    entries: HashMap<NodeId, Visit>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Visit {
    count: u32,
    first: u64,
}

impl VisitTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, id: NodeId, iteration: u64) {
        self.entries
            .entry(id)
            .and_modify(|v| v.count += 1)
            .or_insert(Visit {
                count: 1,
                first: iteration,
            });
    }

    pub fn count(&self, id: NodeId) -> u32 {
        self.entries.get(&id).map_or(0, |v| v.count)
    }

    pub fn distinct(&self) -> usize {
        self.entries.len()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|v| v.count as u64).sum()
    }
}

/// Keeps the `gamma` most frequent nodes, ordered by frequency descending,
/// then first-visit iteration, then node id.
pub fn sort_most_frequent(tally: &VisitTally, gamma: usize, g: &HetGraph) -> Vec<RankedNeighbor> {
    rank(tally.entries.iter().map(|(&id, &v)| (id, v)).collect(), gamma, g)
}

fn rank(mut entries: Vec<(NodeId, Visit)>, gamma: usize, g: &HetGraph) -> Vec<RankedNeighbor> {
    let order = |(a_id, a): &(NodeId, Visit), (b_id, b): &(NodeId, Visit)| {
        b.count
            .cmp(&a.count)
            .then(a.first.cmp(&b.first))
            .then(a_id.cmp(b_id))
    };
    if gamma == 0 {
        return Vec::new();
    }
    // the order is total, so selecting before sorting changes nothing
    if entries.len() > gamma {
        entries.select_nth_unstable_by(gamma - 1, order);
        entries.truncate(gamma);
    }
    entries.sort_unstable_by(order);
    entries
        .into_iter()
        .map(|(id, v)| RankedNeighbor {
            id,
            node_type: g.node_type(id).expect("tallied node exists in graph"),
            frequency: v.count,
        })
        .collect()
}

/// Dense per-thread counters, reset after each walk by clearing only the
/// touched slots.
#[derive(Default)]
struct DenseTally {
    visits: Vec<Visit>,
    touched: Vec<usize>,
}

thread_local! {
    static SCRATCH: RefCell<DenseTally> = RefCell::new(DenseTally::default());
}

/// Dense adjacency for fast walking.
pub struct WalkIndex<'g> {
    graph: &'g HetGraph,
    ids: Vec<NodeId>,
    dense: HashMap<NodeId, usize>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl<'g> WalkIndex<'g> {
    pub fn new(graph: &'g HetGraph) -> Self {
        let ids: Vec<NodeId> = graph.nodes().map(|(id, _)| id).collect();
        let dense: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for &id in &ids {
            for (nb, _) in graph.neighbors(id).expect("node exists") {
                targets.push(dense[nb]);
            }
            offsets.push(targets.len());
        }
        WalkIndex {
            graph,
            ids,
            dense,
            offsets,
            targets,
        }
    }

    fn neighbors(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn sample(&self, root: NodeId, cfg: &WalkConfig) -> Result<NeighborSample, SampleError> {
        cfg.validate()?;
        match self.graph.node_type(root) {
            None => return Err(SampleError::UnknownNode(root)),
            Some(NodeType::News) => {}
            Some(_) => return Err(SampleError::NotANewsNode(root)),
        }
        let root_ix = self.dense[&root];
        if self.neighbors(root_ix).is_empty() {
            return Ok(NeighborSample::empty(root));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(root_seed(cfg.seed, root));
        SCRATCH.with_borrow_mut(|scratch| {
            let DenseTally { visits, touched } = scratch;
            if visits.len() < self.ids.len() {
                visits.resize(self.ids.len(), Visit::default());
            }
            let mut current = root_ix;
            for t in 0..cfg.iterations as u64 {
                if rng.random::<f64>() < cfg.restart_p {
                    current = root_ix;
                }
                let nbrs = self.neighbors(current);
                // undirected graph: any node reached by an edge has degree >= 1
                let next = nbrs[rng.random_range(0..nbrs.len())];
                if next != root_ix {
                    let v = &mut visits[next];
                    if v.count == 0 {
                        v.first = t;
                        touched.push(next);
                    }
                    v.count += 1;
                }
                current = next;
            }
            let entries: Vec<(NodeId, Visit)> = touched
                .drain(..)
                .map(|i| (self.ids[i], std::mem::take(&mut visits[i])))
                .collect();
            Ok(NeighborSample {
                root,
                ranked: rank(entries, cfg.top_gamma, self.graph),
            })
        })
    }
}

/// Stable 64-bit mix of the global seed and a root id.
pub fn root_seed(seed: u64, root: NodeId) -> u64 {
    splitmix64(seed ^ splitmix64(root.0))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn sample_neighbors(g: &HetGraph, root: NodeId, cfg: &WalkConfig) -> Result<NeighborSample, SampleError> {
    WalkIndex::new(g).sample(root, cfg)
}

/// Samples every news node. The result does not depend on `workers`.
pub fn sample_all(
    g: &HetGraph,
    cfg: &WalkConfig,
    workers: usize,
) -> Result<BTreeMap<NodeId, NeighborSample>, SampleError> {
    cfg.validate()?;
    let index = WalkIndex::new(g);
    let roots = g.news_ids();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SampleError::InvalidConfig(e.to_string()))?;
    let samples: Vec<NeighborSample> = pool.install(|| {
        roots
            .par_iter()
            .map(|&root| index.sample(root, cfg))
            .collect::<Result<_, _>>()
    })?;
    Ok(samples.into_iter().map(|s| (s.root, s)).collect())
}

/// Stationary distribution of recorded (non-root) nodes for the
/// restart-augmented walk, by power iteration on the root's component.
pub fn rwr_oracle(g: &HetGraph, root: NodeId, restart_p: f64) -> Result<BTreeMap<NodeId, f64>, SampleError> {
    let root_nbrs = g.neighbors(root).map_err(|_| SampleError::UnknownNode(root))?;
    if root_nbrs.is_empty() {
        return Err(SampleError::NoNeighbors(root));
    }
    // component of the root, BFS order
    let mut order = vec![root];
    let mut local: HashMap<NodeId, usize> = HashMap::from([(root, 0)]);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &(w, _) in g.neighbors(v).expect("node exists") {
            if let std::collections::hash_map::Entry::Vacant(e) = local.entry(w) {
                e.insert(order.len());
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    let n = order.len();
    let adj: Vec<Vec<usize>> = order
        .iter()
        .map(|&v| g.neighbors(v).unwrap().iter().map(|(w, _)| local[w]).collect())
        .collect();

    // one transition: restart to root with prob p, then a uniform neighbor step.
    let step = |pi: &[f64]| -> Vec<f64> {
        let mut next = vec![0.0; n];
        let mut restart_mass = 0.0;
        for (v, &mass) in pi.iter().enumerate() {
            restart_mass += restart_p * mass;
            let stay = (1.0 - restart_p) * mass;
            let share = stay / adj[v].len() as f64;
            for &w in &adj[v] {
                next[w] += share;
            }
        }
        let share = restart_mass / adj[0].len() as f64;
        for &w in &adj[0] {
            next[w] += share;
        }
        next
    };

    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000_000 {
        // lazy chain: same stationary distribution, aperiodic
        let stepped = step(&pi);
        let next: Vec<f64> = pi.iter().zip(&stepped).map(|(a, b)| 0.5 * (a + b)).collect();
        let residual: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if residual < 1e-12 {
            break;
        }
    }
    let non_root: f64 = pi[1..].iter().sum();
    Ok(order[1..]
        .iter()
        .zip(&pi[1..])
        .map(|(&id, &p)| (id, p / non_root))
        .collect())
}

pub fn write_cache(path: &Path, samples: &BTreeMap<NodeId, NeighborSample>) -> Result<(), SampleError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_cache(samples))?;
    w.flush()?;
    Ok(())
}

pub fn encode_cache(samples: &BTreeMap<NodeId, NeighborSample>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RWR_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for (root, sample) in samples {
        out.extend_from_slice(&root.0.to_le_bytes());
        out.extend_from_slice(&(sample.ranked.len() as u16).to_le_bytes());
        for r in &sample.ranked {
            out.extend_from_slice(&r.id.0.to_le_bytes());
            out.push(r.node_type.code());
            out.extend_from_slice(&r.frequency.to_le_bytes());
        }
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<BTreeMap<NodeId, NeighborSample>, SampleError> {
    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl Reader<'_> {
        fn take<const N: usize>(&mut self) -> Result<[u8; N], SampleError> {
            let end = self.pos + N;
            let chunk = self.bytes.get(self.pos..end).ok_or(SampleError::Truncated)?;
            self.pos = end;
            Ok(chunk.try_into().unwrap())
        }
    }
    if bytes.len() < 8 || &bytes[..8] != RWR_MAGIC {
        return Err(SampleError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 8 };
    let count = u32::from_le_bytes(r.take()?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let root = NodeId(u64::from_le_bytes(r.take()?));
        let l = u16::from_le_bytes(r.take()?);
        let mut ranked = Vec::with_capacity(l as usize);
        for _ in 0..l {
            let id = NodeId(u64::from_le_bytes(r.take()?));
            let [code] = r.take::<1>()?;
            let node_type = NodeType::from_code(code).ok_or(SampleError::BadNodeType(code))?;
            let frequency = u32::from_le_bytes(r.take()?);
            ranked.push(RankedNeighbor {
                id,
                node_type,
                frequency,
            });
        }
        out.insert(root, NeighborSample { root, ranked });
    }
    Ok(out)
}

pub fn read_cache(path: &Path) -> Result<BTreeMap<NodeId, NeighborSample>, SampleError> {
    decode_cache(&fs::read(path)?)
}
