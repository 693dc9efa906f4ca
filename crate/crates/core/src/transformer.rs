//! Encoder-decoder aggregation of a news node's typed neighbor sequence.
//!
//! The encoder reads the target followed by every sampled neighbor in RWR
//! rank order, each token carrying learned positional and type embeddings.
//! The decoder reads the target followed by its news-type neighbors and
//! cross-attends to the encoder output. Position 0 of the decoder output is
//! the target representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::tensor::{ParamId, ParamInit, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
    /// Encoder only: the representation is encoder position 0.
    #[serde(default)]
    pub no_decoder: bool,
    /// Positional tables are zero and frozen.
    #[serde(default)]
    pub no_positional: bool,
}

impl TransformerConfig {
    pub fn new(model_dim: usize, heads: usize, layers: usize, max_len: usize) -> Self {
        TransformerConfig {
            layers,
            heads,
            model_dim,
            ff_dim: 4 * model_dim,
            dropout: 0.1,
            max_len,
            no_decoder: false,
            no_positional: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_len == 0 || self.ff_dim == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig("max_len, ff_dim and dropout out of range".into()));
        }
        Ok(())
    }
}

/// Token type ids for the type embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenType {
    Target = 0,
    News = 1,
    Post = 2,
    User = 3,
}

impl From<crate::graph::NodeType> for TokenType {
    fn from(t: crate::graph::NodeType) -> Self {
        match t {
            crate::graph::NodeType::News => TokenType::News,
            crate::graph::NodeType::Post => TokenType::Post,
            crate::graph::NodeType::User => TokenType::User,
        }
    }
}

/// One padded token sequence on a tape.
#[derive(Clone, Debug)]
pub struct SequenceInput {
    /// `padded_len x d`
    pub tokens: Var,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
    pub type_ids: Vec<TokenType>,
}

impl SequenceInput {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn padded_len(&self) -> usize {
        self.mask.len()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct HetTransformer {
    cfg: TransformerConfig,
    pos: ParamId,
    types: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Option<Decoder>,
}

impl HetTransformer {
    pub fn new<T: Real>(
        cfg: TransformerConfig,
        store: &mut ParamStore<T>,
        init: &ParamInit,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let pos_value = if cfg.no_positional {
            Tensor::zeros(&[cfg.max_len, d])
        } else {
            init.normal("xf.pos", &[cfg.max_len, d], 0.1)
        };
        let pos = store.insert("xf.pos", pos_value)?;
        if cfg.no_positional {
            store.freeze(pos);
        }
        let types = store.insert("xf.type", init.normal("xf.type", &[4, d], 0.1))?;
        let mut encoder = Vec::with_capacity(cfg.layers);
        for j in 0..cfg.layers {
            let p = format!("xf.enc.layer{j}");
            encoder.push(EncoderLayer {
                norm_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), d)?,
                attn: MultiHeadAttention::new(store, init, &format!("{p}.attn"), d, cfg.heads)?,
                norm_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d)?,
                ff: FeedForward::new(store, init, &p, d, cfg.ff_dim)?,
            });
        }
        let enc_norm = LayerNorm::new(store, "xf.enc.ln_out", d)?;
        let decoder = if cfg.no_decoder {
            None
        } else {
            let mut layers = Vec::with_capacity(cfg.layers);
            for j in 0..cfg.layers {
                let p = format!("xf.dec.layer{j}");
                layers.push(DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{p}.ln_self"), d)?,
                    self_attn: MultiHeadAttention::new(store, init, &format!("{p}.self_attn"), d, cfg.heads)?,
                    norm_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d)?,
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{p}.cross_attn"), d, cfg.heads)?,
                    norm_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d)?,
                    ff: FeedForward::new(store, init, &p, d, cfg.ff_dim)?,
                });
            }
            Some(Decoder {
                layers,
                norm: LayerNorm::new(store, "xf.dec.ln_out", d)?,
            })
        };
        Ok(HetTransformer {
            cfg,
            pos,
            types,
            encoder,
            enc_norm,
            decoder,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Adds positional and type embeddings to `content` rows and pads to
    /// `pad_to` tokens with zero rows.
    fn decorate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        content: Var,
        type_ids: Vec<TokenType>,
        pad_to: usize,
    ) -> Result<SequenceInput, ModelError> {
        let real = type_ids.len();
        let len = pad_to.max(real);
        if len > self.cfg.max_len {
            return Err(ModelError::LengthOverflow {
                len,
                max: self.cfg.max_len,
            });
        }
        let mut tokens = content;
        if !self.cfg.no_positional {
            let table = tape.param(store, self.pos)?;
            let pos = tape.embedding_lookup(table, &(0..real).collect::<Vec<_>>())?;
            tokens = tape.add(tokens, pos)?;
        }
        let table = tape.param(store, self.types)?;
        let ids: Vec<usize> = type_ids.iter().map(|&t| t as usize).collect();
        let ty = tape.embedding_lookup(table, &ids)?;
        tokens = tape.add(tokens, ty)?;
        if len > real {
            let pad = tape.zeros(len - real, self.cfg.model_dim)?;
            tokens = tape.concat_rows(&[tokens, pad])?;
        }
        let mut mask = vec![true; real];
        mask.resize(len, false);
        Ok(SequenceInput {
            tokens,
            mask,
            type_ids,
        })
    }

    /// Encoder input: target then all neighbors in rank order (`l + 1` tokens).
    pub fn build_enc_input<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        neighbors: Var,
        neighbor_types: &[TokenType],
        pad_to: usize,
    ) -> Result<SequenceInput, ModelError> {
        if tape.shape(neighbors).0 != neighbor_types.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} neighbor rows but {} type ids",
                tape.shape(neighbors).0,
                neighbor_types.len()
            )));
        }
        let content = tape.concat_rows(&[target, neighbors])?;
        let mut type_ids = vec![TokenType::Target];
        type_ids.extend_from_slice(neighbor_types);
        self.decorate(tape, store, content, type_ids, pad_to)
    }

    /// Decoder input: target then its news-type neighbors (`m_n + 1` tokens),
    /// all typed as news.
    pub fn build_dec_input<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        target: Var,
        news_neighbors: Var,
        pad_to: usize,
    ) -> Result<SequenceInput, ModelError> {
        let content = tape.concat_rows(&[target, news_neighbors])?;
        let n = tape.shape(content).0;
        self.decorate(tape, store, content, vec![TokenType::News; n], pad_to)
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    /// Runs one sequence pair and returns the `1 x d` representation.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        enc: &SequenceInput,
        dec: &SequenceInput,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, ModelError> {
        let rate = self.cfg.dropout;
        let mut x = enc.tokens;
        for layer in &self.encoder {
            let h = layer.norm_attn.forward(tape, store, x)?;
            let h = layer.attn.forward(tape, store, h, h, Some(&enc.mask))?;
            let h = tape.dropout(h, rate, train, rng)?;
            x = tape.add(x, h)?;
            let h = layer.norm_ff.forward(tape, store, x)?;
            let h = layer.ff.forward(tape, store, h)?;
            let h = tape.dropout(h, rate, train, rng)?;
            x = tape.add(x, h)?;
        }
        let memory = self.enc_norm.forward(tape, store, x)?;
        let Some(decoder) = &self.decoder else {
            return Ok(tape.gather_rows(memory, &[0])?);
        };
        let mut y = dec.tokens;
        for layer in &decoder.layers {
            let h = layer.norm_self.forward(tape, store, y)?;
            let h = layer.self_attn.forward(tape, store, h, h, Some(&dec.mask))?;
            let h = tape.dropout(h, rate, train, rng)?;
            y = tape.add(y, h)?;
            let h = layer.norm_cross.forward(tape, store, y)?;
            let h = layer.cross_attn.forward(tape, store, h, memory, Some(&enc.mask))?;
            let h = tape.dropout(h, rate, train, rng)?;
            y = tape.add(y, h)?;
            let h = layer.norm_ff.forward(tape, store, y)?;
            let h = layer.ff.forward(tape, store, h)?;
            let h = tape.dropout(h, rate, train, rng)?;
            y = tape.add(y, h)?;
        }
        let out = decoder.norm.forward(tape, store, y)?;
        Ok(tape.gather_rows(out, &[0])?)
    }

    /// Runs a batch of sequence pairs and stacks the results into `B x d`.
    pub fn forward_batch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[(SequenceInput, SequenceInput)],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, ModelError> {
        let reps = batch
            .iter()
            .map(|(e, d)| self.forward(tape, store, e, d, train, rng))
            .collect::<Result<Vec<_>, _>>()?;
        if reps.is_empty() {
            return Ok(tape.zeros(0, self.cfg.model_dim)?);
        }
        Ok(tape.concat_rows(&reps)?)
    }
}
