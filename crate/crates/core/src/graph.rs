//! Typed heterogeneous graph of news, post and user nodes.
//!
//! Edges are stored undirected: every edge appears in the adjacency list of
//! both endpoints. Adjacency lists are kept sorted by neighbor id so that
//! traversal order never depends on input line order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    News,
    Post,
    User,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::News, NodeType::Post, NodeType::User];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::News => "news",
            NodeType::Post => "post",
            NodeType::User => "user",
        }
    }

    /// Compact code used by the binary cache formats.
    pub fn code(self) -> u8 {
        match self {
            NodeType::News => 0,
            NodeType::Post => 1,
            NodeType::User => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<NodeType> {
        match code {
            0 => Some(NodeType::News),
            1 => Some(NodeType::Post),
            2 => Some(NodeType::User),
            _ => None,
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeType {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "news" => Ok(NodeType::News),
            "post" => Ok(NodeType::Post),
            "user" => Ok(NodeType::User),
            other => Err(GraphError::UnknownNodeType(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeType {
    NewsPost,
    NewsUser,
    PostUser,
    PostPost,
    UserUser,
}

impl EdgeType {
    pub const ALL: [EdgeType; 5] = [
        EdgeType::NewsPost,
        EdgeType::NewsUser,
        EdgeType::PostUser,
        EdgeType::PostPost,
        EdgeType::UserUser,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::NewsPost => "np",
            EdgeType::NewsUser => "nu",
            EdgeType::PostUser => "pu",
            EdgeType::PostPost => "pp",
            EdgeType::UserUser => "uu",
        }
    }

    /// The unordered pair of node types this relation joins.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            EdgeType::NewsPost => (NodeType::News, NodeType::Post),
            EdgeType::NewsUser => (NodeType::News, NodeType::User),
            EdgeType::PostUser => (NodeType::Post, NodeType::User),
            EdgeType::PostPost => (NodeType::Post, NodeType::Post),
            EdgeType::UserUser => (NodeType::User, NodeType::User),
        }
    }

    pub fn joins(self, a: NodeType, b: NodeType) -> bool {
        let (x, y) = self.endpoints();
        (a == x && b == y) || (a == y && b == x)
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EdgeType {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EdgeType::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| GraphError::UnknownEdgeType(s.to_string()))
    }
}

/// Credibility label of a news node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NewsLabel {
    Fake = 0,
    Real = 1,
}

impl NewsLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            NewsLabel::Fake => 0.0,
            NewsLabel::Real => 1.0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<NewsLabel> {
        match bit {
            0 => Some(NewsLabel::Fake),
            1 => Some(NewsLabel::Real),
            _ => None,
        }
    }
}

/// Which relations a dataset family is allowed to contain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    #[default]
    FakeNewsNet,
    /// No follow relation between users.
    Pheme,
}

impl Schema {
    pub fn allows(self, etype: EdgeType) -> bool {
        match self {
            Schema::FakeNewsNet => true,
            Schema::Pheme => etype != EdgeType::UserUser,
        }
    }
}

impl FromStr for Schema {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fakenewsnet" => Ok(Schema::FakeNewsNet),
            "pheme" => Ok(Schema::Pheme),
            other => Err(GraphError::UnknownSchema(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{file}:{line}: malformed line: {reason}")]
    MalformedLine {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("unknown node type `{0}`")]
    UnknownNodeType(String),
    #[error("unknown edge type `{0}`")]
    UnknownEdgeType(String),
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("edge endpoint {0} does not exist")]
    DanglingEdge(NodeId),
    #[error("edge {src}-{dst} of type {etype}: {detail}")]
    TypeMismatch {
        src: NodeId,
        dst: NodeId,
        etype: EdgeType,
        detail: String,
    },
    #[error("node {0} declared twice")]
    DuplicateNode(NodeId),
    #[error("duplicate edge {0}-{1} ({2})")]
    DuplicateEdge(NodeId, NodeId, EdgeType),
    #[error("self-loop on node {0}")]
    SelfLoop(NodeId),
    #[error("label on non-news node {0}")]
    LabelOnNonNews(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable, validated heterogeneous graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    schema: Schema,
    nodes: BTreeMap<NodeId, NodeType>,
    labels: BTreeMap<NodeId, NewsLabel>,
    adjacency: HashMap<NodeId, Vec<(NodeId, EdgeType)>>,
    edge_count: usize,
}

/// Builder that enforces graph invariants as nodes and edges arrive.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    schema: Schema,
    nodes: BTreeMap<NodeId, NodeType>,
    labels: BTreeMap<NodeId, NewsLabel>,
    edges: HashSet<(NodeId, NodeId, EdgeType)>,
}

impl GraphBuilder {
    pub fn new(schema: Schema) -> Self {
        GraphBuilder {
            schema,
            ..Default::default()
        }
    }

    pub fn add_node(
        &mut self,
        id: NodeId,
        node_type: NodeType,
        label: Option<NewsLabel>,
    ) -> Result<&mut Self, GraphError> {
        if self.nodes.insert(id, node_type).is_some() {
            return Err(GraphError::DuplicateNode(id));
        }
        if let Some(label) = label {
            if node_type != NodeType::News {
                return Err(GraphError::LabelOnNonNews(id));
            }
            self.labels.insert(id, label);
        }
        Ok(self)
    }

    pub fn add_edge(
        &mut self,
        src: NodeId,
        dst: NodeId,
        etype: EdgeType,
    ) -> Result<&mut Self, GraphError> {
        let src_type = *self.nodes.get(&src).ok_or(GraphError::DanglingEdge(src))?;
        let dst_type = *self.nodes.get(&dst).ok_or(GraphError::DanglingEdge(dst))?;
        if src == dst {
            return Err(GraphError::SelfLoop(src));
        }
        if !etype.joins(src_type, dst_type) {
            return Err(GraphError::TypeMismatch {
                src,
                dst,
                etype,
                detail: format!("joins {src_type} and {dst_type}"),
            });
        }
        if !self.schema.allows(etype) {
            return Err(GraphError::TypeMismatch {
                src,
                dst,
                etype,
                detail: format!("relation not allowed by the {:?} schema", self.schema),
            });
        }
        let key = (src.min(dst), src.max(dst), etype);
        if !self.edges.insert(key) {
            return Err(GraphError::DuplicateEdge(key.0, key.1, etype));
        }
        Ok(self)
    }

    pub fn build(self) -> HetGraph {
        let mut adjacency: HashMap<NodeId, Vec<(NodeId, EdgeType)>> = HashMap::new();
        for &(a, b, etype) in &self.edges {
            adjacency.entry(a).or_default().push((b, etype));
            adjacency.entry(b).or_default().push((a, etype));
        }
        for list in adjacency.values_mut() {
            list.sort_unstable();
        }
        HetGraph {
            schema: self.schema,
            nodes: self.nodes,
            labels: self.labels,
            adjacency,
            edge_count: self.edges.len(),
        }
    }
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> GraphError {
    GraphError::MalformedLine {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_id(file: &str, line: usize, field: &str) -> Result<NodeId, GraphError> {
    field
        .parse::<u64>()
        .map(NodeId)
        .map_err(|_| malformed(file, line, format!("bad node id `{field}`")))
}

impl HetGraph {
    /// Parses `nodes.tsv` and `edges.tsv` contents.
    pub fn parse(nodes_tsv: &str, edges_tsv: &str, schema: Schema) -> Result<HetGraph, GraphError> {
        let mut builder = GraphBuilder::new(schema);
        for (line, text) in data_lines(nodes_tsv) {
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed("nodes.tsv", line, "expected 3 tab-separated fields"));
            }
            let id = parse_id("nodes.tsv", line, fields[0])?;
            let node_type: NodeType = fields[1].parse()?;
            let label = match fields[2] {
                "-" => None,
                "0" => Some(NewsLabel::Fake),
                "1" => Some(NewsLabel::Real),
                other => return Err(malformed("nodes.tsv", line, format!("bad label `{other}`"))),
            };
            builder.add_node(id, node_type, label)?;
        }
        for (line, text) in data_lines(edges_tsv) {
            let fields: Vec<&str> = text.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed("edges.tsv", line, "expected 3 tab-separated fields"));
            }
            let src = parse_id("edges.tsv", line, fields[0])?;
            let dst = parse_id("edges.tsv", line, fields[1])?;
            let etype: EdgeType = fields[2].parse()?;
            builder.add_edge(src, dst, etype)?;
        }
        Ok(builder.build())
    }

    pub fn load(nodes_path: &Path, edges_path: &Path, schema: Schema) -> Result<HetGraph, GraphError> {
        let nodes = fs::read_to_string(nodes_path)?;
        let edges = fs::read_to_string(edges_path)?;
        HetGraph::parse(&nodes, &edges, schema)
    }

    /// Loads `nodes.tsv` and `edges.tsv` from a dataset directory.
    pub fn load_dir(dir: &Path, schema: Schema) -> Result<HetGraph, GraphError> {
        HetGraph::load(&dir.join("nodes.tsv"), &dir.join("edges.tsv"), schema)
    }

    /// Writes the graph in the TSV formats, nodes and edges sorted by id.
    pub fn write_dir(&self, dir: &Path) -> Result<(), GraphError> {
        fs::create_dir_all(dir)?;
        let mut nodes = BufWriter::new(fs::File::create(dir.join("nodes.tsv"))?);
        for (&id, &node_type) in &self.nodes {
            let label = match self.labels.get(&id) {
                Some(NewsLabel::Fake) => "0",
                Some(NewsLabel::Real) => "1",
                None => "-",
            };
            writeln!(nodes, "{id}\t{node_type}\t{label}")?;
        }
        nodes.flush()?;
        let mut edges = BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
        for (a, b, etype) in self.edges() {
            writeln!(edges, "{a}\t{b}\t{etype}")?;
        }
        edges.flush()?;
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.nodes.contains_key(&v)
    }

    pub fn node_type(&self, v: NodeId) -> Option<NodeType> {
        self.nodes.get(&v).copied()
    }

    pub fn label(&self, v: NodeId) -> Option<NewsLabel> {
        self.labels.get(&v).copied()
    }

    pub fn labels(&self) -> &BTreeMap<NodeId, NewsLabel> {
        &self.labels
    }

    /// All nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, NodeType)> + '_ {
        self.nodes.iter().map(|(&id, &t)| (id, t))
    }

    /// News node ids in ascending order.
    pub fn news_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, &t)| t == NodeType::News)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Neighbors of `v`, sorted ascending by neighbor id.
    pub fn neighbors(&self, v: NodeId) -> Result<&[(NodeId, EdgeType)], GraphError> {
        if !self.nodes.contains_key(&v) {
            return Err(GraphError::UnknownNode(v));
        }
        Ok(self.adjacency.get(&v).map(Vec::as_slice).unwrap_or(&[]))
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency.get(&v).map_or(0, Vec::len)
    }

    /// Every undirected edge once, as (smaller id, larger id, type), sorted.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, EdgeType)> {
        let mut out: Vec<_> = self
            .adjacency
            .iter()
            .flat_map(|(&a, list)| {
                list.iter()
                    .filter(move |(b, _)| a < *b)
                    .map(move |&(b, etype)| (a, b, etype))
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn stats(&self) -> GraphStats {
        let mut stats = GraphStats::default();
        for &t in self.nodes.values() {
            *stats.nodes.entry(t).or_default() += 1;
        }
        for (_, _, etype) in self.edges() {
            *stats.edges.entry(etype).or_default() += 1;
        }
        for &label in self.labels.values() {
            match label {
                NewsLabel::Fake => stats.fake += 1,
                NewsLabel::Real => stats.real += 1,
            }
        }
        stats.total_news = stats.nodes.get(&NodeType::News).copied().unwrap_or(0);
        stats.total_nodes = self.nodes.len();
        stats.total_edges = self.edge_count;
        stats
    }
}

/// Per-type node and edge counts plus label counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub nodes: BTreeMap<NodeType, usize>,
    pub edges: BTreeMap<EdgeType, usize>,
    pub total_nodes: usize,
    pub total_edges: usize,
    pub total_news: usize,
    pub fake: usize,
    pub real: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_NODES: &str = "1\tnews\t0\n2\tpost\t-\n3\tuser\t-\n";
    const MINIMAL_EDGES: &str = "1\t2\tnp\n2\t3\tpu\n";

    #[test]
    fn minimal_graph() {
        let g = HetGraph::parse(MINIMAL_NODES, MINIMAL_EDGES, Schema::FakeNewsNet).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.label(NodeId(1)), Some(NewsLabel::Fake));
    }

    #[test]
    fn dangling_edge() {
        let err = HetGraph::parse(MINIMAL_NODES, "1\t99\tnp\n", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::DanglingEdge(NodeId(99))));
    }

    #[test]
    fn pheme_rejects_follow() {
        let nodes = "1\tnews\t1\n2\tuser\t-\n3\tuser\t-\n";
        let edges = "1\t2\tnu\n2\t3\tuu\n";
        assert!(HetGraph::parse(nodes, edges, Schema::FakeNewsNet).is_ok());
        let err = HetGraph::parse(nodes, edges, Schema::Pheme).unwrap_err();
        assert!(matches!(err, GraphError::TypeMismatch { etype: EdgeType::UserUser, .. }));
    }

    #[test]
    fn type_mismatch() {
        let err = HetGraph::parse(MINIMAL_NODES, "1\t3\tnp\n", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::TypeMismatch { .. }));
    }

    #[test]
    fn malformed_and_unknown() {
        let err = HetGraph::parse("1\tnews\n", "", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::MalformedLine { line: 1, .. }));
        let err = HetGraph::parse("# header\n1\tarticle\t0\n", "", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::UnknownNodeType(_)));
        let err = HetGraph::parse("1\tnews\t0\n1\tpost\t-\n", "", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateNode(NodeId(1))));
    }

    #[test]
    fn duplicate_and_reversed_edges() {
        let err =
            HetGraph::parse(MINIMAL_NODES, "1\t2\tnp\n2\t1\tnp\n", Schema::FakeNewsNet).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateEdge(..)));
    }

    #[test]
    fn neighbors_sorted_and_isolated() {
        let nodes = "5\tnews\t1\n9\tpost\t-\n3\tpost\t-\n7\tuser\t-\n8\tuser\t-\n";
        let edges = "5\t9\tnp\n5\t7\tnu\n3\t5\tnp\n";
        let g = HetGraph::parse(nodes, edges, Schema::FakeNewsNet).unwrap();
        let ids: Vec<u64> = g.neighbors(NodeId(5)).unwrap().iter().map(|(v, _)| v.0).collect();
        assert_eq!(ids, vec![3, 7, 9]);
        assert!(g.neighbors(NodeId(8)).unwrap().is_empty());
        assert!(matches!(g.neighbors(NodeId(42)), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn star_center_degree() {
        let mut b = GraphBuilder::new(Schema::FakeNewsNet);
        b.add_node(NodeId(0), NodeType::News, Some(NewsLabel::Real)).unwrap();
        for leaf in 1..=4 {
            b.add_node(NodeId(leaf), NodeType::Post, None).unwrap();
            b.add_edge(NodeId(0), NodeId(leaf), EdgeType::NewsPost).unwrap();
        }
        let g = b.build();
        assert_eq!(g.neighbors(NodeId(0)).unwrap().len(), 4);
        for leaf in 1..=4 {
            assert_eq!(g.neighbors(NodeId(leaf)).unwrap(), &[(NodeId(0), EdgeType::NewsPost)]);
        }
    }

    #[test]
    fn empty_stats() {
        let g = HetGraph::parse("", "", Schema::FakeNewsNet).unwrap();
        let s = g.stats();
        assert_eq!((s.total_nodes, s.total_edges, s.total_news, s.fake, s.real), (0, 0, 0, 0, 0));
    }

    #[test]
    fn load_is_order_independent() {
        let nodes_a = "1\tnews\t0\n2\tpost\t-\n3\tuser\t-\n";
        let nodes_b = "3\tuser\t-\n1\tnews\t0\n2\tpost\t-\n";
        let edges_a = "1\t2\tnp\n2\t3\tpu\n";
        let edges_b = "3\t2\tpu\n2\t1\tnp\n";
        let a = HetGraph::parse(nodes_a, edges_a, Schema::FakeNewsNet).unwrap();
        let b = HetGraph::parse(nodes_b, edges_b, Schema::FakeNewsNet).unwrap();
        assert_eq!(a, b);
    }
}
