//! Desk-scale synthetic propagation graphs with a planted label signal.
//!
//! Users form two communities. Fake news is spread mainly by community A and
//! real news by community B, with `community_strength` controlling how
//! strictly. Every attribute vector is a class-dependent mean scaled by the
//! signal strength plus unit Gaussian noise. News content follows the news
//! label; post and user content follow the community of the user involved,
//! so they only carry label information through the wiring.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embstore::{AttributeKey, EmbeddingTable, FeatureStore};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, GraphBuilder, HetGraph, NewsLabel, NodeId, NodeType, Schema};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SynthAttribute {
    pub node_type: NodeType,
    pub name: String,
    pub dim: usize,
}

fn default_attributes() -> Vec<SynthAttribute> {
    let a = |node_type, name: &str| SynthAttribute {
        node_type,
        name: name.into(),
        dim: 32,
    };
    vec![
        a(NodeType::News, "text"),
        a(NodeType::News, "image"),
        a(NodeType::Post, "text"),
        a(NodeType::User, "profile"),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub news: usize,
    pub fake_fraction: f64,
    /// Poisson mean of posts per news item (at least one post is kept).
    pub posts_per_news: f64,
    /// Users engaging with each post besides its author.
    pub users_per_post: usize,
    pub users: usize,
    /// `sigma_c`: 0 wires every post to a uniformly random community, 1 wires
    /// it only to the community of its news class.
    pub community_strength: f64,
    /// `s`: scales every class-dependent mean.
    pub signal: f64,
    /// Mean offset of news attributes at full signal, per attribute.
    pub content_margin: f64,
    /// Mean offset of post and user attributes at full signal.
    pub context_margin: f64,
    /// Probability that a post re-posts an earlier post of the same news.
    pub repost_prob: f64,
    pub follows_per_user: usize,
    /// When non-zero, each community is cut into circles of about this many
    /// users and every news item is spread by a single circle per side.
    pub circle_size: usize,
    /// Broadcaster accounts outside both communities. They engage with posts
    /// of either class and carry no community signal.
    pub hubs: usize,
    /// Probability that a post is also engaged by one random hub.
    pub hub_rate: f64,
    /// Share of follow edges drawn from the whole population instead of the
    /// follower's community.
    pub cross_follow: f64,
    /// News content is pure noise; only the wiring carries the label.
    pub content_free: bool,
    pub attributes: Vec<SynthAttribute>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            news: 500,
            fake_fraction: 0.5,
            posts_per_news: 6.0,
            users_per_post: 2,
            users: 400,
            community_strength: 1.0,
            signal: 1.0,
            content_margin: 2.0,
            context_margin: 0.5,
            repost_prob: 0.3,
            follows_per_user: 3,
            circle_size: 0,
            hubs: 0,
            hub_rate: 0.5,
            cross_follow: 0.25,
            content_free: false,
            attributes: default_attributes(),
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Content-free graph whose label evidence sits in small friend circles.
    /// A handful of nearby nodes is informative; past the circle the walk
    /// drifts through shared hubs and follow edges into mixed territory, so
    /// accuracy peaks at a moderate neighborhood size.
    pub fn circles() -> Self {
        SynthConfig {
            news: 1000,
            users: 2000,
            posts_per_news: 2.0,
            users_per_post: 1,
            hubs: 5,
            hub_rate: 1.0,
            follows_per_user: 5,
            cross_follow: 1.0,
            circle_size: 4,
            context_margin: 0.6,
            content_free: true,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.news == 0 || self.users < 2 {
            return Err(Error::Config("synth needs at least 1 news item and 2 users".into()));
        }
        if !unit(self.fake_fraction)
            || !unit(self.community_strength)
            || !unit(self.signal)
            || !unit(self.repost_prob)
            || !unit(self.cross_follow)
            || !unit(self.hub_rate)
        {
            return Err(Error::Config("synth fractions and strengths must lie in [0, 1]".into()));
        }
        if !(self.posts_per_news > 0.0 && self.posts_per_news.is_finite()) {
            return Err(Error::Config("posts_per_news must be positive".into()));
        }
        if !(self.content_margin.is_finite() && self.context_margin.is_finite()) {
            return Err(Error::Config("margins must be finite".into()));
        }
        for t in NodeType::ALL {
            if !self.attributes.iter().any(|a| a.node_type == t) {
                return Err(Error::Config(format!("synth declares no attribute for {t}")));
            }
        }
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if a.dim == 0 || !seen.insert((a.node_type, a.name.as_str())) {
                return Err(Error::Config(format!("bad synth attribute {}.{}", a.node_type, a.name)));
            }
        }
        Ok(())
    }
}

/// Generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub graph: HetGraph,
    pub features: FeatureStore,
    /// Community of every non-hub user: `false` for A (fake side), `true`
    /// for B.
    pub communities: BTreeMap<NodeId, bool>,
}

impl SynthDataset {
    /// Writes `nodes.tsv`, `edges.tsv` and `emb/<type>.<attr>.hetemb`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.graph.write_dir(dir)?;
        self.features.write_dir(&dir.join("emb"))?;
        Ok(())
    }
}

/// The same dataset with news content replaced by noise.
pub fn content_free_variant(cfg: &SynthConfig) -> Result<SynthDataset> {
    generate(&SynthConfig {
        content_free: true,
        ..cfg.clone()
    })
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A random circle of the side `[start, end)`, or the whole side when
/// circles are disabled.
fn pick_circle(rng: &mut ChaCha8Rng, start: usize, end: usize, circle_size: usize) -> (usize, usize) {
    let len = end - start;
    if circle_size == 0 || circle_size >= len {
        return (start, end);
    }
    let k = len / circle_size;
    let j = rng.random_range(0..k);
    (start + j * len / k, start + (j + 1) * len / k)
}

/// Draws from `home` with probability `(1 + strength) / 2`, else from `away`.
fn pick_user(rng: &mut ChaCha8Rng, home: (usize, usize), away: (usize, usize), strength: f64) -> usize {
    let (lo, hi) = if rng.random_bool((1.0 + strength) / 2.0) { home } else { away };
    rng.random_range(lo..hi)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.news;
    let half = cfg.users / 2;

    let n_fake = (cfg.fake_fraction * n as f64).round() as usize;
    let mut labels: Vec<NewsLabel> = (0..n)
        .map(|i| if i < n_fake { NewsLabel::Fake } else { NewsLabel::Real })
        .collect();
    labels.shuffle(&mut rng);

    // ids: news, then users, then hubs, then posts
    let news_id = |i: usize| NodeId(i as u64);
    let user_id = |u: usize| NodeId((n + u) as u64);
    let user_community = |u: usize| u >= half;

    let poisson = Poisson::new(cfg.posts_per_news).map_err(|e| Error::Config(e.to_string()))?;
    let mut edges: BTreeSet<(NodeId, NodeId, EdgeType)> = BTreeSet::new();
    // (post id, author index)
    let mut posts: Vec<(NodeId, usize)> = Vec::new();
    let hub_id = |h: usize| NodeId((n + cfg.users + h) as u64);
    let mut next_post = (n + cfg.users + cfg.hubs) as u64;
    for (i, &label) in labels.iter().enumerate() {
        let sides = [(0, half), (half, cfg.users)];
        let (home_side, away_side) = if label == NewsLabel::Real { (sides[1], sides[0]) } else { (sides[0], sides[1]) };
        let home = pick_circle(&mut rng, home_side.0, home_side.1, cfg.circle_size);
        let away = pick_circle(&mut rng, away_side.0, away_side.1, cfg.circle_size);
        let count = (poisson.sample(&mut rng) as usize).max(1);
        let mut own: Vec<NodeId> = Vec::with_capacity(count);
        for _ in 0..count {
            let post = NodeId(next_post);
            next_post += 1;
            let author = pick_user(&mut rng, home, away, cfg.community_strength);
            edges.insert((news_id(i), post, EdgeType::NewsPost));
            edges.insert((news_id(i), user_id(author), EdgeType::NewsUser));
            edges.insert((post, user_id(author), EdgeType::PostUser));
            for _ in 0..cfg.users_per_post {
                let u = pick_user(&mut rng, home, away, cfg.community_strength);
                edges.insert((post, user_id(u), EdgeType::PostUser));
            }
            if cfg.hubs > 0 && rng.random_bool(cfg.hub_rate) {
                edges.insert((post, hub_id(rng.random_range(0..cfg.hubs)), EdgeType::PostUser));
            }
            if !own.is_empty() && rng.random_bool(cfg.repost_prob) {
                let parent = own[rng.random_range(0..own.len())];
                edges.insert((parent, post, EdgeType::PostPost));
            }
            own.push(post);
            posts.push((post, author));
        }
    }
    for u in 0..cfg.users {
        for _ in 0..cfg.follows_per_user {
            let v = if rng.random_bool(cfg.cross_follow) {
                rng.random_range(0..cfg.users)
            } else if user_community(u) {
                rng.random_range(half..cfg.users)
            } else {
                rng.random_range(0..half)
            };
            if v != u {
                let (a, b) = (u.min(v), u.max(v));
                edges.insert((user_id(a), user_id(b), EdgeType::UserUser));
            }
        }
    }

    let mut builder = GraphBuilder::new(Schema::FakeNewsNet);
    for (i, &label) in labels.iter().enumerate() {
        builder.add_node(news_id(i), NodeType::News, Some(label))?;
    }
    for u in 0..cfg.users {
        builder.add_node(user_id(u), NodeType::User, None)?;
    }
    for h in 0..cfg.hubs {
        builder.add_node(hub_id(h), NodeType::User, None)?;
    }
    for &(p, _) in &posts {
        builder.add_node(p, NodeType::Post, None)?;
    }
    for &(a, b, t) in &edges {
        builder.add_edge(a, b, t)?;
    }
    let graph = builder.build();

    let mut features = FeatureStore::new();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut attrs = cfg.attributes.clone();
    attrs.sort();
    for attr in &attrs {
        let direction = unit_direction(&mut rng, attr.dim);
        // (node, class side: -1 fake / community A, +1 real / community B)
        let (margin, rows): (f64, Vec<(NodeId, f64)>) = match attr.node_type {
            NodeType::News => {
                let m = if cfg.content_free { 0.0 } else { cfg.content_margin };
                let rows = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (news_id(i), if l == NewsLabel::Real { 1.0 } else { -1.0 }))
                    .collect();
                (m, rows)
            }
            NodeType::Post => (
                cfg.context_margin,
                posts
                    .iter()
                    .map(|&(p, author)| (p, if user_community(author) { 1.0 } else { -1.0 }))
                    .collect(),
            ),
            NodeType::User => (
                cfg.context_margin,
                (0..cfg.users)
                    .map(|u| (user_id(u), if user_community(u) { 1.0 } else { -1.0 }))
                    .chain((0..cfg.hubs).map(|h| (hub_id(h), 0.0)))
                    .collect(),
            ),
        };
        let scale = margin * cfg.signal;
        let mut table = EmbeddingTable::new(attr.dim)?;
        for (id, side) in rows {
            let v = direction
                .iter()
                .map(|&d| (side * scale * d + noise.sample(&mut rng)) as f32)
                .collect();
            table.insert(id, v)?;
        }
        features.insert(AttributeKey::new(attr.node_type, attr.name.clone()), table)?;
    }

    let communities = (0..cfg.users).map(|u| (user_id(u), user_community(u))).collect();
    Ok(SynthDataset {
        graph,
        features,
        communities,
    })
}
