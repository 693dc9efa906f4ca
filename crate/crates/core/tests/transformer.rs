mod common;

use std::collections::BTreeMap;

use common::*;
use hetformer::experiment::{Dataset, ExperimentConfig};
use hetformer::graph::{NodeId, NodeType};
use hetformer::model::HetTransformerModel;
use hetformer::nn::MultiHeadAttention;
use hetformer::rwr::{sample_all, NeighborSample, RankedNeighbor, WalkConfig};
use hetformer::synth::{generate, SynthConfig};
use hetformer::tensor::{ParamInit, ParamStore, Tape, Tensor};
use hetformer::transformer::{HetTransformer, TokenType, TransformerConfig};
use rand::Rng;

/// Overwrites every parameter with Gaussian noise so zero biases and unit
/// gains cannot hide mistakes.
fn scramble(store: &mut ParamStore<f64>, seed: u64) {
    let mut g = rng(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let id = store.id(&name).unwrap();
        let p = store.get_mut(id);
        let noise = gaussian(&mut g, p.value.len());
        p.value.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v = 0.5 * n);
    }
}

struct Instance {
    target: Mat,
    neighbors: Mat,
    types: Vec<TokenType>,
    news: Mat,
}

fn instance(seed: u64, d: usize, l: usize) -> Instance {
    let mut g = rng(seed);
    let types: Vec<TokenType> = (0..l)
        .map(|_| [TokenType::News, TokenType::Post, TokenType::User][g.random_range(0..3)])
        .collect();
    let neighbors = random_mat(&mut g, l, d);
    let news: Mat = neighbors
        .iter()
        .zip(&types)
        .filter(|(_, &t)| t == TokenType::News)
        .map(|(r, _)| r.clone())
        .collect();
    Instance {
        target: random_mat(&mut g, 1, d),
        neighbors,
        types,
        news,
    }
}

fn rows_or_empty(tape: &mut Tape<f64>, m: &Mat, d: usize) -> hetformer::tensor::Var {
    if m.is_empty() {
        tape.zeros(0, d).unwrap()
    } else {
        tape.constant(mat_tensor(m)).unwrap()
    }
}

fn run(
    xf: &HetTransformer,
    store: &ParamStore<f64>,
    inst: &Instance,
    pad_enc: usize,
    pad_dec: usize,
) -> Vec<f64> {
    let d = xf.config().model_dim;
    let mut tape = Tape::new();
    let t = tape.constant(mat_tensor(&inst.target)).unwrap();
    let n = rows_or_empty(&mut tape, &inst.neighbors, d);
    let nn = rows_or_empty(&mut tape, &inst.news, d);
    let enc = xf.build_enc_input(&mut tape, store, t, n, &inst.types, pad_enc).unwrap();
    let dec = xf.build_dec_input(&mut tape, store, t, nn, pad_dec).unwrap();
    let rep = xf.forward(&mut tape, store, &enc, &dec, false, &mut rng(0)).unwrap();
    tape.value(rep).data().to_vec()
}

fn oracle(store: &ParamStore<f64>, cfg: &TransformerConfig, inst: &Instance) -> Vec<f64> {
    let mut enc_content = inst.target.clone();
    enc_content.extend(inst.neighbors.iter().cloned());
    let mut enc_types = vec![TokenType::Target as usize];
    enc_types.extend(inst.types.iter().map(|&t| t as usize));
    let mut dec_content = inst.target.clone();
    dec_content.extend(inst.news.iter().cloned());
    let dec_types = vec![TokenType::News as usize; dec_content.len()];
    let positional = !cfg.no_positional;
    let enc = decorate(store, &enc_content, &enc_types, positional);
    let dec = decorate(store, &dec_content, &dec_types, positional);
    transformer_oracle(store, cfg.layers, cfg.heads, &enc, &dec, !cfg.no_decoder)
}

fn build(cfg: TransformerConfig, seed: u64) -> (HetTransformer, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let xf = HetTransformer::new(cfg, &mut store, &ParamInit::new(seed)).unwrap();
    scramble(&mut store, seed + 1);
    (xf, store)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_head_single_layer_matches_explicit_loops() {
    let cfg = TransformerConfig::new(4, 1, 1, 12);
    let (xf, store) = build(cfg.clone(), 1);
    for seed in 0..5 {
        let inst = instance(seed, 4, 7);
        let gap = max_gap(&run(&xf, &store, &inst, 0, 0), &oracle(&store, &cfg, &inst));
        assert!(gap < 1e-6, "seed {seed}: {gap}");
    }
}

#[test]
fn deeper_and_wider_variants_match_explicit_loops() {
    for (d, h, layers) in [(8, 2, 1), (8, 4, 2), (6, 3, 3)] {
        for (no_decoder, no_positional) in [(false, false), (true, false), (false, true)] {
            let mut cfg = TransformerConfig::new(d, h, layers, 16);
            cfg.no_decoder = no_decoder;
            cfg.no_positional = no_positional;
            let (xf, store) = build(cfg.clone(), d as u64 + layers as u64);
            let inst = instance(9, d, 10);
            let gap = max_gap(&run(&xf, &store, &inst, 0, 0), &oracle(&store, &cfg, &inst));
            assert!(gap < 1e-6, "{d}/{h}/{layers} {no_decoder} {no_positional}: {gap}");
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, &ParamInit::new(4), "a", 8, 2).unwrap();
    let mut g = rng(3);
    let q = random_mat(&mut g, 5, 8);
    let m = random_mat(&mut g, 6, 8);
    let keep = [true, false, true, true, false, true];
    let mut tape = Tape::new();
    let qv = tape.constant(mat_tensor(&q)).unwrap();
    let mv = tape.constant(mat_tensor(&m)).unwrap();
    let (_, weights) = mha.forward_with_weights(&mut tape, &store, qv, mv, Some(&keep)).unwrap();
    assert_eq!(weights.len(), 2);
    for (h, &w) in weights.iter().enumerate() {
        let got = to_mat(tape.value(w));
        let qh = matmul(&q, &param(&store, &format!("a.head{h}.q")));
        let kh = matmul(&m, &param(&store, &format!("a.head{h}.k")));
        let want = attention_weights(&qh, &kh, &keep);
        for (row, want_row) in got.iter().zip(&want) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, (&x, &y)) in row.iter().zip(want_row).enumerate() {
                assert!((x - y).abs() < 1e-12);
                if !keep[j] {
                    assert_eq!(x, 0.0);
                }
            }
        }
    }
}

#[test]
fn padding_never_reaches_real_positions() {
    let cfg = TransformerConfig::new(8, 2, 2, 24);
    let (xf, store) = build(cfg, 5);
    for seed in 0..10 {
        let l = seed as usize % 9;
        let inst = instance(100 + seed, 8, l);
        let tight = run(&xf, &store, &inst, 0, 0);
        for extra in [1, 4, 10] {
            let padded = run(&xf, &store, &inst, l + 1 + extra, inst.news.len() + 1 + extra);
            assert!(max_gap(&tight, &padded) <= 1e-6);
        }
    }
}

#[test]
fn no_context_depends_on_target_only() {
    let cfg = TransformerConfig::new(8, 2, 1, 4);
    let (xf, store) = build(cfg, 6);
    let inst = instance(1, 8, 0);
    assert_eq!(run(&xf, &store, &inst, 0, 0), run(&xf, &store, &inst, 0, 0));
    let other = Instance {
        target: random_mat(&mut rng(99), 1, 8),
        ..instance(1, 8, 0)
    };
    assert!(max_gap(&run(&xf, &store, &inst, 0, 0), &run(&xf, &store, &other, 0, 0)) > 1e-8);
}

#[test]
fn swapping_tokens_moves_the_representation() {
    let cfg = TransformerConfig::new(8, 2, 1, 16);
    let (xf, store) = build(cfg, 7);
    for seed in 0..10 {
        let mut inst = instance(200 + seed, 8, 6);
        // same type so only the positional signal tells them apart
        inst.types = vec![TokenType::Post; 6];
        inst.news.clear();
        let before = run(&xf, &store, &inst, 0, 0);
        inst.neighbors.swap(0, 4);
        let after = run(&xf, &store, &inst, 0, 0);
        let change: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(change > 1e-8, "seed {seed}");
    }
}

#[test]
fn without_positions_same_type_swaps_are_invisible() {
    let mut cfg = TransformerConfig::new(8, 2, 1, 16);
    cfg.no_positional = true;
    let (xf, store) = build(cfg, 8);
    // scramble touched the frozen table too; restore the zero contract
    let mut store = store;
    let pos = store.id("xf.pos").unwrap();
    store.get_mut(pos).value = Tensor::zeros(&[16, 8]);
    let mut inst = instance(5, 8, 6);
    inst.types = vec![TokenType::User; 6];
    inst.news.clear();
    let before = run(&xf, &store, &inst, 0, 0);
    inst.neighbors.swap(1, 3);
    assert!(max_gap(&before, &run(&xf, &store, &inst, 0, 0)) < 1e-12);
}

#[test]
fn ablation_switches_change_only_what_they_name() {
    let base = TransformerConfig::new(8, 2, 1, 10);
    let full_names: Vec<String> = {
        let mut s = ParamStore::<f64>::new();
        HetTransformer::new(base.clone(), &mut s, &ParamInit::new(1)).unwrap();
        s.names().map(String::from).collect()
    };
    assert!(full_names.iter().any(|n| n.starts_with("xf.dec.")));

    let mut s = ParamStore::<f64>::new();
    HetTransformer::new(TransformerConfig { no_decoder: true, ..base.clone() }, &mut s, &ParamInit::new(1)).unwrap();
    let enc_only: Vec<String> = s.names().map(String::from).collect();
    assert!(!enc_only.iter().any(|n| n.starts_with("xf.dec.")));
    let expected: Vec<&String> = full_names.iter().filter(|n| !n.starts_with("xf.dec.")).collect();
    assert_eq!(enc_only.iter().collect::<Vec<_>>(), expected);

    let mut s = ParamStore::<f64>::new();
    let xf = HetTransformer::new(TransformerConfig { no_positional: true, ..base.clone() }, &mut s, &ParamInit::new(1)).unwrap();
    let pos = s.by_name("xf.pos").unwrap();
    assert!(pos.frozen && pos.value.data().iter().all(|&v| v == 0.0));
    // tokens are content plus type rows only
    let inst = instance(3, 8, 4);
    let mut tape = Tape::new();
    let t = tape.constant(mat_tensor(&inst.target)).unwrap();
    let n = tape.constant(mat_tensor(&inst.neighbors)).unwrap();
    let enc = xf.build_enc_input(&mut tape, &s, t, n, &inst.types, 0).unwrap();
    let ty = param(&s, "xf.type");
    let got = to_mat(tape.value(enc.tokens));
    let mut content = inst.target.clone();
    content.extend(inst.neighbors.clone());
    for (i, row) in got.iter().enumerate() {
        let tid = if i == 0 { 0 } else { inst.types[i - 1] as usize };
        for j in 0..8 {
            assert!((row[j] - content[i][j] - ty[tid][j]).abs() < 1e-15);
        }
    }

    // both switches off: same parameters bit for bit
    let mut a = ParamStore::<f64>::new();
    let mut b = ParamStore::<f64>::new();
    HetTransformer::new(base.clone(), &mut a, &ParamInit::new(9)).unwrap();
    HetTransformer::new(base, &mut b, &ParamInit::new(9)).unwrap();
    assert_eq!(a.snapshot(), b.snapshot());
}

#[test]
fn length_overflow_is_reported() {
    let cfg = TransformerConfig::new(4, 1, 1, 3);
    let (xf, store) = build(cfg, 2);
    let inst = instance(1, 4, 5);
    let mut tape = Tape::new();
    let t = tape.constant(mat_tensor(&inst.target)).unwrap();
    let n = tape.constant(mat_tensor(&inst.neighbors)).unwrap();
    assert!(matches!(
        xf.build_enc_input(&mut tape, &store, t, n, &inst.types, 0),
        Err(hetformer::ModelError::LengthOverflow { len: 6, max: 3 })
    ));
}

/// Random subsets of real walk output, so partitions vary in size.
fn random_samples(data: &Dataset, seed: u64, gamma: usize) -> BTreeMap<NodeId, NeighborSample> {
    let walk = WalkConfig {
        top_gamma: gamma,
        iterations: 2_000,
        seed,
        ..WalkConfig::default()
    };
    let mut g = rng(seed);
    sample_all(&data.graph, &walk, 1)
        .unwrap()
        .into_iter()
        .map(|(id, s)| {
            let keep = g.random_range(0..=s.len());
            let ranked: Vec<RankedNeighbor> = s.ranked.into_iter().take(keep).collect();
            (id, NeighborSample { root: id, ranked })
        })
        .collect()
}

#[test]
fn sequence_lengths_follow_the_sample() {
    let data: Dataset = generate(&SynthConfig {
        news: 40,
        users: 60,
        ..SynthConfig::default()
    })
    .unwrap()
    .into();
    let mut cfg = ExperimentConfig::default();
    cfg.model.unified_dim = 8;
    cfg.model.heads = 2;
    cfg.model.content_heads = 2;
    cfg.walk.top_gamma = 12;
    let (model, store) = HetTransformerModel::new::<f64>(cfg.model_config(&data.features), 1).unwrap();
    for seed in 0..3 {
        let samples = random_samples(&data, seed, 12);
        for (&id, s) in &samples {
            let mut tape = Tape::new();
            let inputs = model.build_inputs(&mut tape, &store, data.context(&samples), id, 0, 0).unwrap();
            let (m_n, _, _) = s.sizes();
            assert_eq!(inputs.enc.real_len(), s.len() + 1);
            assert_eq!(inputs.dec.real_len(), m_n + 1);
            let mut types = vec![TokenType::Target];
            types.extend(s.ranked.iter().map(|r| TokenType::from(r.node_type)));
            assert_eq!(inputs.enc.type_ids, types);
            assert!(inputs.dec.type_ids.iter().all(|&t| t == TokenType::News));

            // decoder rows 1.. equal the news rows of the encoder content,
            // in rank order
            let news_rows = model
                .content()
                .encode_nodes(&mut tape, &store, &data.features, NodeType::News, &s.partition(NodeType::News))
                .unwrap();
            let pos = param(&store, "xf.pos");
            let ty = param(&store, "xf.type");
            let dec = to_mat(tape.value(inputs.dec.tokens));
            let raw = to_mat(tape.value(news_rows));
            for (k, row) in raw.iter().enumerate() {
                for j in 0..8 {
                    let want = row[j] + pos[k + 1][j] + ty[TokenType::News as usize][j];
                    assert!((dec[k + 1][j] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn batch_padding_matches_single_items() {
    let data: Dataset = generate(&SynthConfig {
        news: 30,
        users: 50,
        ..SynthConfig::default()
    })
    .unwrap()
    .into();
    let mut cfg = ExperimentConfig::default();
    cfg.model.unified_dim = 8;
    cfg.model.heads = 2;
    cfg.model.content_heads = 2;
    cfg.walk.top_gamma = 10;
    let (model, store) = HetTransformerModel::new::<f64>(cfg.model_config(&data.features), 2).unwrap();
    let samples = random_samples(&data, 4, 10);
    let ids: Vec<NodeId> = samples.keys().copied().collect();
    let mut tape = Tape::new();
    let batch = model.predict_batch(&mut tape, &store, data.context(&samples), &ids, false, &mut rng(0)).unwrap();
    let batch = tape.value(batch).data().to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let mut tape = Tape::new();
        let one = model.predict_batch(&mut tape, &store, data.context(&samples), &[id], false, &mut rng(0)).unwrap();
        assert!((tape.value(one).data()[0] - batch[i]).abs() <= 1e-6);
    }
}
