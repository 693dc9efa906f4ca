//! Layers shared by the content aggregator and the transformer.

use crate::tensor::{ParamId, ParamInit, ParamStore, Real, Result, Tape, Tensor, TensorError, Var};

/// Multi-head scaled dot-product attention with per-head projection matrices.
///
/// Parameters are named `<prefix>.head<i>.{q,k,v}` (each `d x d/h`) and
/// `<prefix>.o` (`d x d`). Attention logits are scaled by `1/sqrt(d/h)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: Vec<[ParamId; 3]>,
    out: ParamId,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &ParamInit,
        prefix: &str,
        model_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(TensorError::HeadSplit { dim: model_dim, heads });
        }
        let head_dim = model_dim / heads;
        let mut ids = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut triple = [ParamId(0); 3];
            for (slot, part) in triple.iter_mut().zip(["q", "k", "v"]) {
                let name = format!("{prefix}.head{h}.{part}");
                *slot = store.insert(&name, init.xavier(&name, model_dim, head_dim))?;
            }
            ids.push(triple);
        }
        let name = format!("{prefix}.o");
        let out = store.insert(&name, init.xavier(&name, model_dim, model_dim))?;
        Ok(MultiHeadAttention {
            heads: ids,
            out,
            head_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        memory: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, query, memory, key_mask)?.0)
    }

    /// Also returns each head's attention weight matrix (`queries x keys`).
    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        memory: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for &[wq, wk, wv] in &self.heads {
            let (wq, wk, wv) = (tape.param(store, wq)?, tape.param(store, wk)?, tape.param(store, wv)?);
            let q = tape.matmul(query, wq)?;
            let k = tape.matmul(memory, wk)?;
            let v = tape.matmul(memory, wv)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.softmax_rows_masked(logits, key_mask)?;
            outputs.push(tape.matmul(attn, v)?);
            weights.push(attn);
        }
        let concat = tape.concat_cols(&outputs)?;
        let wo = tape.param(store, self.out)?;
        Ok((tape.matmul(concat, wo)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let ones = Tensor::new(vec![dim], vec![T::one(); dim])?;
        let gain = store.insert(format!("{prefix}.gain"), ones)?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain)?;
        let b = tape.param(store, self.bias)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Affine map `x W + b` with `W` of shape `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &ParamInit,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let name = format!("{prefix}.w");
        let weight = store.insert(&name, init.xavier(&name, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &ParamInit,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, init, &format!("{prefix}.ff1"), dim, hidden, true)?,
            outer: Linear::new(store, init, &format!("{prefix}.ff2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, store, h)
    }
}
