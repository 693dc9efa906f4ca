//! Central-difference checks of every tape primitive and layer.

use hetformer::experiment::{model_grad_check, toy_config, toy_dataset};
use hetformer::model::{Head, HeadConfig};
use hetformer::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use hetformer::tensor::{grad_check, GradCheckReport, ParamInit, ParamStore, Tape, TensorError, Var};
use hetformer::transformer::{HetTransformer, TokenType, TransformerConfig};
use hetformer::ModelError;

use super::{mat_tensor, random_mat, rng, Mat};

pub const EPS: f64 = 1e-5;

/// Binds `inputs` as parameters `x0, x1, ...`, applies `f` and reduces the
/// result with a fixed random weighting so every output entry matters.
fn check_op(
    inputs: &[Mat],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
) -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| store.insert(format!("x{i}"), mat_tensor(m)).unwrap())
        .collect();
    grad_check(&mut store, EPS, |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let vars = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<Vec<_>, _>>()?;
        let out = f(tape, &vars)?;
        let (r, c) = tape.shape(out);
        let weights = tape.constant(mat_tensor(&random_mat(&mut rng(seed ^ 0xabc), r, c)))?;
        let prod = tape.mul(out, weights)?;
        tape.sum(prod)
    })
    .unwrap()
}

fn module_check(
    store: &mut ParamStore<f64>,
    inputs: &[Mat],
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var, ModelError>,
) -> GradCheckReport {
    let n = store.len();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, m)| store.insert(format!("input{}", n + i), mat_tensor(m)).unwrap())
        .collect();
    grad_check(store, EPS, |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var, ModelError> {
        let vars = ids.iter().map(|&id| tape.param(store, id)).collect::<Result<Vec<_>, _>>()?;
        let out = f(tape, store, &vars)?;
        let (r, c) = tape.shape(out);
        let weights = tape.constant(mat_tensor(&random_mat(&mut rng(seed ^ 0xdef), r, c)))?;
        let prod = tape.mul(out, weights)?;
        Ok(tape.sum(prod)?)
    })
    .unwrap()
}

/// One report per primitive, layer and the full model.
pub fn all_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut g = rng(77);
    let mut m = |r, c| random_mat(&mut g, r, c);
    let a34 = m(3, 4);
    let b34 = m(3, 4);
    let b45 = m(4, 5);
    let row4 = m(1, 4);
    let a24 = m(2, 4);
    let probs: Mat = vec![vec![0.2, 0.7, 0.55, 0.9]];

    let mut out: Vec<(&'static str, GradCheckReport)> = vec![
        ("matmul", check_op(&[a34.clone(), b45], 1, |t, v| t.matmul(v[0], v[1]))),
        ("transpose", check_op(std::slice::from_ref(&a34), 2, |t, v| t.transpose(v[0]))),
        ("add", check_op(&[a34.clone(), b34.clone()], 3, |t, v| t.add(v[0], v[1]))),
        ("sub", check_op(&[a34.clone(), b34.clone()], 4, |t, v| t.sub(v[0], v[1]))),
        ("mul", check_op(&[a34.clone(), b34.clone()], 5, |t, v| t.mul(v[0], v[1]))),
        ("add_row", check_op(&[a34.clone(), row4.clone()], 6, |t, v| t.add_row(v[0], v[1]))),
        ("mul_row", check_op(&[a34.clone(), row4.clone()], 7, |t, v| t.mul_row(v[0], v[1]))),
        ("scale", check_op(std::slice::from_ref(&a34), 8, |t, v| t.scale(v[0], -1.7))),
        ("relu", check_op(std::slice::from_ref(&a34), 9, |t, v| t.relu(v[0]))),
        ("sigmoid", check_op(std::slice::from_ref(&a34), 10, |t, v| t.sigmoid(v[0]))),
        ("softmax_rows", check_op(std::slice::from_ref(&a34), 11, |t, v| t.softmax_rows(v[0]))),
        (
            "softmax_rows_masked",
            check_op(std::slice::from_ref(&a34), 12, |t, v| t.softmax_rows_masked(v[0], Some(&[true, false, true, true]))),
        ),
        (
            "dropout",
            check_op(std::slice::from_ref(&a34), 13, |t, v| t.dropout(v[0], 0.3, true, &mut rng(5))),
        ),
        ("normalize_rows", check_op(std::slice::from_ref(&a34), 14, |t, v| t.normalize_rows(v[0], 1e-5))),
        (
            "layer_norm",
            check_op(&[a34.clone(), row4.clone(), m(1, 4)], 15, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("concat_rows", check_op(&[a34.clone(), a24.clone()], 16, |t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", check_op(&[a34.clone(), b34.clone()], 17, |t, v| t.concat_cols(&[v[0], v[1]]))),
        ("gather_rows", check_op(std::slice::from_ref(&a34), 18, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]))),
        ("mean_rows", check_op(std::slice::from_ref(&a34), 19, |t, v| t.mean_rows(v[0]))),
        ("mean_of", check_op(&[a34.clone(), b34.clone()], 20, |t, v| t.mean_of(&[v[0], v[1]]))),
        ("sum", check_op(std::slice::from_ref(&a34), 21, |t, v| t.sum(v[0]))),
        ("mean", check_op(std::slice::from_ref(&a34), 22, |t, v| t.mean(v[0]))),
        (
            "bce_mean",
            check_op(&[probs], 23, |t, v| {
                let p = t.transpose(v[0])?;
                t.bce_mean(p, &[1.0, 0.0, 1.0, 0.0], Some(&[1.0, 2.0, 0.5, 1.0]), 1e-7)
            }),
        ),
    ];

    let init = ParamInit::new(3);
    let x = m(5, 8);
    let mem = m(3, 8);

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, &init, "mha", 8, 2).unwrap();
    out.push((
        "multi_head_attention",
        module_check(&mut s, &[x.clone(), mem.clone()], 30, |t, st, v| {
            Ok(mha.forward(t, st, v[0], v[1], Some(&[true, true, false]))?)
        }),
    ));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 8).unwrap();
    out.push(("layer_norm_module", module_check(&mut s, std::slice::from_ref(&x), 31, |t, st, v| Ok(ln.forward(t, st, v[0])?))));

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &init, "lin", 8, 3, true).unwrap();
    out.push(("linear", module_check(&mut s, std::slice::from_ref(&x), 32, |t, st, v| Ok(lin.forward(t, st, v[0])?))));

    let mut s = ParamStore::new();
    let ff = FeedForward::new(&mut s, &init, "ff", 8, 16).unwrap();
    out.push(("feed_forward", module_check(&mut s, std::slice::from_ref(&x), 33, |t, st, v| Ok(ff.forward(t, st, v[0])?))));

    let mut s = ParamStore::new();
    let head = Head::new(&HeadConfig { hidden: 6, literal_eq8: false }, 8, &mut s, &init).unwrap();
    out.push(("head", module_check(&mut s, &[m(4, 8)], 34, |t, st, v| head.predict(t, st, v[0]))));

    let mut s = ParamStore::new();
    let mut cfg = TransformerConfig::new(8, 2, 1, 8);
    cfg.dropout = 0.1;
    let xf = HetTransformer::new(cfg, &mut s, &init).unwrap();
    let types = [TokenType::Post, TokenType::News, TokenType::User, TokenType::News];
    out.push((
        "transformer",
        module_check(&mut s, &[m(1, 8), m(4, 8), m(2, 8)], 35, |t, st, v| {
            let enc = xf.build_enc_input(t, st, v[0], v[1], &types, 6)?;
            let dec = xf.build_dec_input(t, st, v[0], v[2], 4)?;
            xf.forward(t, st, &enc, &dec, true, &mut rng(9))
        }),
    ));

    let data = toy_dataset(3).unwrap();
    out.push(("full_model", model_grad_check(&toy_config(), &data, EPS).unwrap()));
    out
}
