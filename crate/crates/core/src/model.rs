//! The full classifier: content aggregation, transformer aggregation and
//! the prediction head.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::content::{ContentAggregator, ContentConfig};
use crate::embstore::FeatureStore;
use crate::error::ModelError;
use crate::graph::{HetGraph, NodeId, NodeType};
use crate::nn::Linear;
use crate::rwr::NeighborSample;
use crate::tensor::{ParamInit, ParamStore, Real, Tape, Var};
use crate::transformer::{HetTransformer, SequenceInput, TokenType, TransformerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Hidden width `d_h` of the ReLU layer.
    pub hidden: usize,
    /// `sigmoid(relu(rep W + b))` with a scalar output, read verbatim.
    #[serde(default)]
    pub literal_eq8: bool,
}

/// Classification head.
///
/// Default form: `sigmoid(relu(rep W_h + b_h) W_out + b_out)`.
/// Literal form: `sigmoid(relu(rep W_out + b_out))`, whose output never drops
/// below 0.5.
#[derive(Clone, Debug)]
pub struct Head {
    hidden: Option<Linear>,
    out: Linear,
}

impl Head {
    pub fn new<T: Real>(
        cfg: &HeadConfig,
        input_dim: usize,
        store: &mut ParamStore<T>,
        init: &ParamInit,
    ) -> Result<Self, ModelError> {
        if cfg.literal_eq8 {
            return Ok(Head {
                hidden: None,
                out: Linear::new(store, init, "head.out", input_dim, 1, true)?,
            });
        }
        if cfg.hidden == 0 {
            return Err(ModelError::InvalidConfig("head hidden width must be >= 1".into()));
        }
        Ok(Head {
            hidden: Some(Linear::new(store, init, "head.hidden", input_dim, cfg.hidden, true)?),
            out: Linear::new(store, init, "head.out", cfg.hidden, 1, true)?,
        })
    }

    pub fn hidden_layer(&self) -> Option<&Linear> {
        self.hidden.as_ref()
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// `B x d` representations to `B x 1` probabilities of the real class.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rep: Var) -> Result<Var, ModelError> {
        let logits = match &self.hidden {
            Some(hidden) => {
                let h = hidden.forward(tape, store, rep)?;
                let h = tape.relu(h)?;
                self.out.forward(tape, store, h)?
            }
            None => {
                let z = self.out.forward(tape, store, rep)?;
                tape.relu(z)?
            }
        };
        Ok(tape.sigmoid(logits)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub content: ContentConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
    /// Baseline that classifies from the target's own content encoding only.
    #[serde(default)]
    pub target_only: bool,
}

/// Read-only inputs a forward pass draws from.
#[derive(Clone, Copy)]
pub struct GraphContext<'a> {
    pub graph: &'a HetGraph,
    pub features: &'a FeatureStore,
    pub samples: &'a BTreeMap<NodeId, NeighborSample>,
}

/// Per-item tensors that make up one encoder/decoder pair.
pub struct ItemInputs {
    pub enc: SequenceInput,
    pub dec: SequenceInput,
    pub target: Var,
}

#[derive(Clone, Debug)]
pub struct HetTransformerModel {
    cfg: ModelConfig,
    content: ContentAggregator,
    transformer: Option<HetTransformer>,
    head: Head,
}

impl HetTransformerModel {
    pub fn new<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>), ModelError> {
        let mut store = ParamStore::new();
        let model = Self::register(cfg, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn register<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self, ModelError> {
        let init = ParamInit::new(seed);
        if cfg.content.unified_dim != cfg.transformer.model_dim {
            return Err(ModelError::InvalidConfig(format!(
                "content dim {} differs from transformer dim {}",
                cfg.content.unified_dim, cfg.transformer.model_dim
            )));
        }
        let content = ContentAggregator::new(cfg.content.clone(), store, &init)?;
        let transformer = if cfg.target_only {
            None
        } else {
            Some(HetTransformer::new(cfg.transformer.clone(), store, &init)?)
        };
        let head = Head::new(&cfg.head, cfg.content.unified_dim, store, &init)?;
        Ok(HetTransformerModel {
            cfg,
            content,
            transformer,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn content(&self) -> &ContentAggregator {
        &self.content
    }

    pub fn transformer(&self) -> Option<&HetTransformer> {
        self.transformer.as_ref()
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Encodes the target and its sampled neighbors and assembles both
    /// sequences, padded to `pad_enc`/`pad_dec` tokens.
    pub fn build_inputs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: GraphContext<'_>,
        news: NodeId,
        pad_enc: usize,
        pad_dec: usize,
    ) -> Result<ItemInputs, ModelError> {
        let xf = self
            .transformer
            .as_ref()
            .ok_or_else(|| ModelError::InvalidConfig("target-only model has no sequences".into()))?;
        let sample = ctx.samples.get(&news).ok_or(ModelError::MissingSample(news))?;
        let target = self.content.encode_target(tape, store, ctx.graph, ctx.features, news)?;

        let mut per_type = Vec::with_capacity(3);
        let mut offsets = [0usize; 3];
        let mut offset = 0;
        for (slot, t) in NodeType::ALL.into_iter().enumerate() {
            let nodes = sample.partition(t);
            offsets[slot] = offset;
            offset += nodes.len();
            per_type.push(self.content.encode_nodes(tape, store, ctx.features, t, &nodes)?);
        }
        let news_neighbors = per_type[0];

        // rows of [E_n; E_p; E_u] reordered into the sampled rank order
        let mut seen = [0usize; 3];
        let mut order = Vec::with_capacity(sample.len());
        let mut types = Vec::with_capacity(sample.len());
        for r in &sample.ranked {
            let slot = r.node_type.code() as usize;
            order.push(offsets[slot] + seen[slot]);
            seen[slot] += 1;
            types.push(TokenType::from(r.node_type));
        }
        let stacked = tape.concat_rows(&per_type)?;
        let neighbors = tape.gather_rows(stacked, &order)?;

        let enc = xf.build_enc_input(tape, store, target, neighbors, &types, pad_enc)?;
        let dec = xf.build_dec_input(tape, store, target, news_neighbors, pad_dec)?;
        Ok(ItemInputs { enc, dec, target })
    }

    /// Target representation `1 x d` for one news node.
    pub fn represent<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: GraphContext<'_>,
        news: NodeId,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, ModelError> {
        let Some(xf) = &self.transformer else {
            return self.content.encode_target(tape, store, ctx.graph, ctx.features, news);
        };
        let inputs = self.build_inputs(tape, store, ctx, news, 0, 0)?;
        xf.forward(tape, store, &inputs.enc, &inputs.dec, train, rng)
    }

    /// Probabilities of the real class, `B x 1`, for a batch of news nodes.
    /// Sequences are padded to the longest in the batch.
    pub fn predict_batch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: GraphContext<'_>,
        news: &[NodeId],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, ModelError> {
        let rep = match &self.transformer {
            None => {
                let reps = news
                    .iter()
                    .map(|&n| self.content.encode_target(tape, store, ctx.graph, ctx.features, n))
                    .collect::<Result<Vec<_>, _>>()?;
                tape.concat_rows(&reps)?
            }
            Some(xf) => {
                let lens = news
                    .iter()
                    .map(|n| {
                        let s = ctx.samples.get(n).ok_or(ModelError::MissingSample(*n))?;
                        Ok((s.len() + 1, s.sizes().0 + 1))
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let pad_enc = lens.iter().map(|l| l.0).max().unwrap_or(1);
                let pad_dec = lens.iter().map(|l| l.1).max().unwrap_or(1);
                let mut batch = Vec::with_capacity(news.len());
                for &n in news {
                    let inputs = self.build_inputs(tape, store, ctx, n, pad_enc, pad_dec)?;
                    batch.push((inputs.enc, inputs.dec));
                }
                xf.forward_batch(tape, store, &batch, train, rng)?
            }
        };
        self.head.predict(tape, store, rep)
    }
}
