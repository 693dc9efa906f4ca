//! Independent oracles and check routines shared by the integration tests
//! and the acceptance report.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hetformer::graph::{EdgeType, GraphBuilder, HetGraph, NewsLabel, NodeId, NodeType, Schema};
use hetformer::rwr::{sample_neighbors, WalkConfig};
use hetformer::tensor::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn edge_type_between(a: NodeType, b: NodeType) -> Option<EdgeType> {
    EdgeType::ALL.into_iter().find(|e| e.joins(a, b))
}

/// Connected random heterogeneous graph on `n` nodes; node 0 is news.
pub fn random_graph(seed: u64, n: usize) -> HetGraph {
    let mut rng = rng(seed);
    let mut types = vec![NodeType::News];
    for _ in 1..n {
        types.push(NodeType::ALL[rng.random_range(0..3)]);
    }
    let mut edges = std::collections::BTreeSet::new();
    for i in 1..n {
        let options: Vec<usize> = (0..i).filter(|&j| edge_type_between(types[i], types[j]).is_some()).collect();
        if options.is_empty() {
            // only news before it: make it a post so it can attach
            types[i] = NodeType::Post;
            edges.insert((rng.random_range(0..i), i));
        } else {
            edges.insert((options[rng.random_range(0..options.len())], i));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if edge_type_between(types[i], types[j]).is_some() && rng.random_bool(0.15) {
                edges.insert((i, j));
            }
        }
    }
    let mut b = GraphBuilder::new(Schema::FakeNewsNet);
    for (i, &t) in types.iter().enumerate() {
        let label = (t == NodeType::News).then_some(if i % 2 == 0 { NewsLabel::Fake } else { NewsLabel::Real });
        b.add_node(NodeId(i as u64), t, label).unwrap();
    }
    for (i, j) in edges {
        let et = edge_type_between(types[i], types[j]).unwrap();
        b.add_edge(NodeId(i as u64), NodeId(j as u64), et).unwrap();
    }
    b.build()
}

/// Stationary law of the restart walk restricted to non-root nodes, from a
/// dense linear solve of `pi P = pi`, `sum pi = 1`.
pub fn rwr_stationary_solve(g: &HetGraph, root: NodeId, p: f64) -> BTreeMap<NodeId, f64> {
    let ids: Vec<NodeId> = g.nodes().map(|(id, _)| id).filter(|&id| g.degree(id) > 0).collect();
    let n = ids.len();
    let ix: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let r = ix[&root];
    let mut trans = vec![vec![0.0; n]; n];
    let root_nbrs = g.neighbors(root).unwrap();
    for (v, &id) in ids.iter().enumerate() {
        let nbrs = g.neighbors(id).unwrap();
        for &(w, _) in nbrs {
            trans[v][ix[&w]] += (1.0 - p) / nbrs.len() as f64;
        }
        for &(w, _) in root_nbrs {
            trans[v][ix[&w]] += p / root_nbrs.len() as f64;
        }
    }
    // rows: (P^T - I) pi = 0, last row replaced by normalisation
    let mut a = vec![vec![0.0; n + 1]; n];
    for w in 0..n {
        for v in 0..n {
            a[w][v] = trans[v][w] - if v == w { 1.0 } else { 0.0 };
        }
    }
    a[n - 1] = vec![1.0; n + 1];
    let pi = solve(a);
    let non_root: f64 = (0..n).filter(|&i| i != r).map(|i| pi[i]).sum();
    (0..n)
        .filter(|&i| i != r && pi[i] > 1e-15)
        .map(|i| (ids[i], pi[i] / non_root))
        .collect()
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        let pivot_row = a[col].clone();
        for (row, r) in a.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot_row[col];
                for (x, y) in r[col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * y;
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// Visit shares of every recorded node over one long walk.
pub fn empirical_distribution(g: &HetGraph, root: NodeId, p: f64, iterations: usize, seed: u64) -> BTreeMap<NodeId, f64> {
    let cfg = WalkConfig {
        restart_p: p,
        iterations,
        top_gamma: g.node_count(),
        seed,
    };
    let s = sample_neighbors(g, root, &cfg).unwrap();
    let total: u64 = s.ranked.iter().map(|r| r.frequency as u64).sum();
    s.ranked.iter().map(|r| (r.id, r.frequency as f64 / total as f64)).collect()
}

pub fn l1(a: &BTreeMap<NodeId, f64>, b: &BTreeMap<NodeId, f64>) -> f64 {
    let keys: std::collections::BTreeSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum()
}

/// Worst L1 gap between sampled and solved distributions over ten random
/// graphs of at most 20 nodes, with the restart probability varied.
pub fn rwr_worst_l1(iterations: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let n = 5 + (k as usize * 7) % 16;
        let g = random_graph(100 + k, n);
        let p = [0.15, 0.3, 0.5, 0.7, 0.9][k as usize % 5];
        let exact = rwr_stationary_solve(&g, NodeId(0), p);
        let seen = empirical_distribution(&g, NodeId(0), p, iterations, k);
        worst = worst.max(l1(&exact, &seen));
    }
    worst
}

/// With certain restart every recorded node must be adjacent to the root.
pub fn full_restart_first_order_only() -> bool {
    (0..10u64).all(|k| {
        let g = random_graph(200 + k, 20);
        let cfg = WalkConfig {
            restart_p: 1.0,
            iterations: 5_000,
            top_gamma: 20,
            seed: k,
        };
        let s = sample_neighbors(&g, NodeId(0), &cfg).unwrap();
        let first: std::collections::BTreeSet<NodeId> =
            g.neighbors(NodeId(0)).unwrap().iter().map(|e| e.0).collect();
        let got: std::collections::BTreeSet<NodeId> = s.ranked.iter().map(|r| r.id).collect();
        got == first
    })
}

// ---------------------------------------------------------------------------
// explicit-loop transformer

pub type Mat = Vec<Vec<f64>>;

pub fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    let t: &Tensor<f64> = &store.by_name(name).unwrap().value;
    to_mat(t)
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let m = t.as_matrix();
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn vector(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().value.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * gain[j] + bias[j]).collect()
        })
        .collect()
}

/// Attention weights of one head, `queries x keys`.
pub fn attention_weights(q: &Mat, k: &Mat, keep: &[bool]) -> Mat {
    let dk = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                .collect();
            let max = logits
                .iter()
                .zip(keep)
                .filter(|(_, &m)| m)
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits
                .iter()
                .zip(keep)
                .map(|(l, &m)| if m { (l - max).exp() } else { 0.0 })
                .collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn mha(store: &ParamStore<f64>, prefix: &str, heads: usize, query: &Mat, memory: &Mat, keep: &[bool]) -> Mat {
    let mut concat: Mat = vec![Vec::new(); query.len()];
    for h in 0..heads {
        let q = matmul(query, &param(store, &format!("{prefix}.head{h}.q")));
        let k = matmul(memory, &param(store, &format!("{prefix}.head{h}.k")));
        let v = matmul(memory, &param(store, &format!("{prefix}.head{h}.v")));
        let out = matmul(&attention_weights(&q, &k, keep), &v);
        for (row, o) in concat.iter_mut().zip(out) {
            row.extend(o);
        }
    }
    matmul(&concat, &param(store, &format!("{prefix}.o")))
}

fn ln(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, &vector(store, &format!("{prefix}.gain")), &vector(store, &format!("{prefix}.bias")))
}

fn ffn(store: &ParamStore<f64>, prefix: &str, x: &Mat) -> Mat {
    let bias = |h: Mat, b: Vec<f64>| -> Mat { h.into_iter().map(|r| r.iter().zip(&b).map(|(a, c)| a + c).collect()).collect() };
    let h = bias(matmul(x, &param(store, &format!("{prefix}.ff1.w"))), vector(store, &format!("{prefix}.ff1.b")));
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    bias(matmul(&h, &param(store, &format!("{prefix}.ff2.w"))), vector(store, &format!("{prefix}.ff2.b")))
}

/// Adds positional rows `0..len` and the given type rows to `content`.
pub fn decorate(store: &ParamStore<f64>, content: &Mat, type_ids: &[usize], positional: bool) -> Mat {
    let pos = param(store, "xf.pos");
    let ty = param(store, "xf.type");
    content
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| v + if positional { pos[t][j] } else { 0.0 } + ty[type_ids[t]][j])
                .collect()
        })
        .collect()
}

/// Step-by-step pre-norm encoder-decoder without dropout. Returns the
/// position-0 output of the decoder, or of the encoder when `decoder` is off.
pub fn transformer_oracle(
    store: &ParamStore<f64>,
    layers: usize,
    heads: usize,
    enc_tokens: &Mat,
    dec_tokens: &Mat,
    decoder: bool,
) -> Vec<f64> {
    let enc_keep = vec![true; enc_tokens.len()];
    let dec_keep = vec![true; dec_tokens.len()];
    let mut x = enc_tokens.clone();
    for j in 0..layers {
        let p = format!("xf.enc.layer{j}");
        let h = ln(store, &format!("{p}.ln_attn"), &x);
        x = add(&x, &mha(store, &format!("{p}.attn"), heads, &h, &h, &enc_keep));
        let h = ln(store, &format!("{p}.ln_ff"), &x);
        x = add(&x, &ffn(store, &p, &h));
    }
    let memory = ln(store, "xf.enc.ln_out", &x);
    if !decoder {
        return memory[0].clone();
    }
    let mut y = dec_tokens.clone();
    for j in 0..layers {
        let p = format!("xf.dec.layer{j}");
        let h = ln(store, &format!("{p}.ln_self"), &y);
        y = add(&y, &mha(store, &format!("{p}.self_attn"), heads, &h, &h, &dec_keep));
        let h = ln(store, &format!("{p}.ln_cross"), &y);
        y = add(&y, &mha(store, &format!("{p}.cross_attn"), heads, &h, &memory, &enc_keep));
        let h = ln(store, &format!("{p}.ln_ff"), &y);
        y = add(&y, &ffn(store, &p, &h));
    }
    ln(store, "xf.dec.ln_out", &y)[0].clone()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| gaussian(rng, cols)).collect()
}

pub fn mat_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::matrix(m.len(), cols, m.concat()).unwrap()
}
pub mod grads;
pub mod table;
