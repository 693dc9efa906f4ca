//! Experiment configuration and the sample / train / evaluate / sweep
//! pipeline built on top of the individual modules.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::content::ContentConfig;
use crate::embstore::FeatureStore;
use crate::error::{Error, Result};
use crate::graph::{HetGraph, NewsLabel, NodeId, Schema};
use crate::model::{GraphContext, HeadConfig, HetTransformerModel, ModelConfig};
use crate::rwr::{sample_all, NeighborSample, WalkConfig};
use crate::synth::SynthConfig;
use crate::tensor::{decode_checkpoint, encode_checkpoint, ParamStore, Real, Tensor};
use crate::train::{self, evaluate, MetricsReport, Split, TrainConfig, TrainRun};
use crate::transformer::TransformerConfig;

pub const SEED_ENV: &str = "HETFORMER_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory holding `nodes.tsv` and `edges.tsv`.
    pub graph_dir: Option<PathBuf>,
    /// Directory of `.hetemb` files; defaults to `<graph_dir>/emb`.
    pub emb_dir: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// JSON-lines epoch log.
    pub log: Option<PathBuf>,
}

impl Paths {
    pub fn graph_dir(&self) -> Result<&Path> {
        self.graph_dir
            .as_deref()
            .ok_or_else(|| Error::Config("paths.graph_dir is required".into()))
    }

    pub fn emb_dir(&self) -> Result<PathBuf> {
        match &self.emb_dir {
            Some(p) => Ok(p.clone()),
            None => Ok(self.graph_dir()?.join("emb")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Architecture knobs that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub unified_dim: usize,
    pub content_heads: usize,
    pub content_layers: usize,
    pub per_attribute_blocks: bool,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `4 * unified_dim`.
    pub ff_dim: Option<usize>,
    pub dropout: f64,
    /// Defaults to `top_gamma + 1`.
    pub max_len: Option<usize>,
    /// Defaults to `unified_dim`.
    pub head_hidden: Option<usize>,
    pub literal_eq8: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            unified_dim: 32,
            content_heads: 4,
            content_layers: 1,
            per_attribute_blocks: false,
            layers: 1,
            heads: 4,
            ff_dim: None,
            dropout: 0.1,
            max_len: None,
            head_hidden: None,
            literal_eq8: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_decoder: bool,
    pub no_positional: bool,
    /// Classify from the target's own content only.
    pub target_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: Paths,
    pub schema: Schema,
    pub walk: WalkConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub precision: Precision,
    pub synth: SynthConfig,
    pub sweep_gammas: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            paths: Paths::default(),
            schema: Schema::default(),
            walk: WalkConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
            precision: Precision::default(),
            synth: SynthConfig::default(),
            sweep_gammas: vec![2, 4, 8, 16, 32, 64],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Defaults with the faster optimizer schedule used for the synthetic
    /// benchmarks: at lr 1e-3 plain SGD needs hundreds of epochs there.
    pub fn synthetic() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lr = 0.05;
        cfg.train.momentum = 0.9;
        cfg.train.batch_size = 16;
        cfg
    }

    /// Sets every seed (walk, split, init, dropout and generator).
    pub fn set_seed(&mut self, seed: u64) {
        self.walk.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// Applies `HETFORMER_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    /// Model configuration for the attribute tables present in `features`.
    pub fn model_config(&self, features: &FeatureStore) -> ModelConfig {
        let m = &self.model;
        let mut content = ContentConfig::from_features(features, m.unified_dim, m.content_heads);
        content.attention_layers = m.content_layers;
        content.per_attribute_blocks = m.per_attribute_blocks;
        let mut transformer = TransformerConfig::new(
            m.unified_dim,
            m.heads,
            m.layers,
            m.max_len.unwrap_or(self.walk.top_gamma + 1),
        );
        transformer.ff_dim = m.ff_dim.unwrap_or(4 * m.unified_dim);
        transformer.dropout = m.dropout;
        transformer.no_decoder = self.ablation.no_decoder;
        transformer.no_positional = self.ablation.no_positional;
        ModelConfig {
            content,
            transformer,
            head: HeadConfig {
                hidden: m.head_hidden.unwrap_or(m.unified_dim),
                literal_eq8: m.literal_eq8,
            },
            target_only: self.ablation.target_only,
        }
    }
}

/// Graph plus feature tables.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: HetGraph,
    pub features: FeatureStore,
}

impl Dataset {
    pub fn load(paths: &Paths, schema: Schema) -> Result<Self> {
        Ok(Dataset {
            graph: HetGraph::load_dir(paths.graph_dir()?, schema)?,
            features: FeatureStore::load_dir(&paths.emb_dir()?)?,
        })
    }

    pub fn labeled_news(&self) -> Vec<(NodeId, NewsLabel)> {
        self.graph.labels().iter().map(|(&id, &l)| (id, l)).collect()
    }

    pub fn context<'a>(&'a self, samples: &'a BTreeMap<NodeId, NeighborSample>) -> GraphContext<'a> {
        GraphContext {
            graph: &self.graph,
            features: &self.features,
            samples,
        }
    }
}

impl From<crate::synth::SynthDataset> for Dataset {
    fn from(d: crate::synth::SynthDataset) -> Self {
        Dataset {
            graph: d.graph,
            features: d.features,
        }
    }
}

/// SHA-256 over the input files of a dataset, in a fixed order. Each file
/// contributes its name, length and bytes.
pub fn content_hash(paths: &Paths) -> Result<String> {
    let graph_dir = paths.graph_dir()?;
    let mut files = vec![graph_dir.join("nodes.tsv"), graph_dir.join("edges.tsv")];
    let emb = paths.emb_dir()?;
    if emb.is_dir() {
        let mut tables: Vec<PathBuf> = fs::read_dir(&emb)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "hetemb"))
            .collect();
        tables.sort();
        files.extend(tables);
    }
    let mut hasher = Sha256::new();
    for f in files {
        let bytes = fs::read(&f)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Trained parameters at checkpoint precision, independent of the training
/// precision.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: HetTransformerModel,
    pub checkpoint: Vec<u8>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub run: TrainRun,
    pub split: Split,
    pub num_parameters: usize,
}

fn train_typed<T: Real>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    samples: &BTreeMap<NodeId, NeighborSample>,
    split: &Split,
    log: Option<&mut dyn Write>,
) -> Result<(TrainOutcome, TrainedModel)> {
    let (model, mut store) = HetTransformerModel::new::<T>(cfg.model_config(&data.features), cfg.train.seed)?;
    let run = train::train(&model, &mut store, data.context(samples), split, &cfg.train, log)?;
    let outcome = TrainOutcome {
        run,
        split: split.clone(),
        num_parameters: store.num_scalars(),
    };
    Ok((
        outcome,
        TrainedModel {
            model,
            checkpoint: encode_checkpoint(&store),
        },
    ))
}

/// Splits the labeled news, builds a fresh model and trains it.
pub fn run_train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    samples: &BTreeMap<NodeId, NeighborSample>,
    log: Option<&mut dyn Write>,
) -> Result<(TrainOutcome, TrainedModel)> {
    let split = train::split(&data.labeled_news(), &cfg.train)?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, data, samples, &split, log),
        Precision::F64 => train_typed::<f64>(cfg, data, samples, &split, log),
    }
}

fn store_from_checkpoint<T: Real>(cfg: &ExperimentConfig, data: &Dataset, bytes: &[u8]) -> Result<(HetTransformerModel, ParamStore<T>)> {
    let (model, mut store) = HetTransformerModel::new::<T>(cfg.model_config(&data.features), cfg.train.seed)?;
    let entries = decode_checkpoint(bytes)?;
    let expected: Vec<String> = store.names().map(String::from).collect();
    let found: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    if expected.iter().map(String::as_str).ne(found.iter().copied()) {
        return Err(Error::Config("checkpoint parameters do not match the configured model".into()));
    }
    for e in entries {
        let id = store.id(&e.name).expect("name checked above");
        let value = Tensor::new(e.shape, e.data.iter().map(|&x| T::of(x as f64)).collect())?;
        if value.shape() != store.get(id).value.shape() {
            return Err(Error::Config(format!("checkpoint shape mismatch for {}", e.name)));
        }
        store.get_mut(id).value = value;
    }
    Ok((model, store))
}

/// Evaluates checkpoint bytes on `ids`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    data: &Dataset,
    samples: &BTreeMap<NodeId, NeighborSample>,
    checkpoint: &[u8],
    ids: &[NodeId],
) -> Result<MetricsReport> {
    let ctx = data.context(samples);
    match cfg.precision {
        Precision::F32 => {
            let (model, store) = store_from_checkpoint::<f32>(cfg, data, checkpoint)?;
            evaluate(&model, &store, ctx, ids, cfg.train.workers)
        }
        Precision::F64 => {
            let (model, store) = store_from_checkpoint::<f64>(cfg, data, checkpoint)?;
            evaluate(&model, &store, ctx, ids, cfg.train.workers)
        }
    }
}

pub fn run_sample(cfg: &ExperimentConfig, data: &Dataset, workers: usize) -> Result<BTreeMap<NodeId, NeighborSample>> {
    Ok(sample_all(&data.graph, &cfg.walk, workers)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: usize,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub epochs: usize,
}

/// Trains and tests one model per `gamma`. Walks run once at the largest
/// value; smaller neighborhoods are prefixes of that ranking.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    gammas: &[usize],
    workers: usize,
) -> Result<Vec<SweepRow>> {
    let Some(&max_gamma) = gammas.iter().max() else {
        return Ok(Vec::new());
    };
    let walk = WalkConfig {
        top_gamma: max_gamma,
        ..cfg.walk
    };
    let full = sample_all(&data.graph, &walk, workers)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let samples: BTreeMap<NodeId, NeighborSample> =
            full.iter().map(|(&id, s)| (id, s.truncated(gamma))).collect();
        let mut run_cfg = cfg.clone();
        run_cfg.walk.top_gamma = gamma;
        run_cfg.model.max_len = None;
        let (outcome, _) = run_train(&run_cfg, data, &samples, None)?;
        let test = &outcome.run.test;
        rows.push(SweepRow {
            gamma,
            accuracy: test.accuracy,
            val_accuracy: outcome.run.best_val_acc,
            f1_fake: test.fake.f1,
            f1_real: test.real.f1,
            epochs: outcome.run.epochs.len(),
        });
    }
    Ok(rows)
}

/// The five-node instance used by the full-model gradient check: two
/// labeled news items sharing a post, two users and one follow edge.
pub fn toy_dataset(seed: u64) -> Result<Dataset> {
    use crate::embstore::{AttributeKey, EmbeddingTable};
    use crate::graph::{EdgeType, GraphBuilder, NodeType};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let mut b = GraphBuilder::new(Schema::FakeNewsNet);
    b.add_node(NodeId(0), NodeType::News, Some(NewsLabel::Fake))?
        .add_node(NodeId(1), NodeType::News, Some(NewsLabel::Real))?
        .add_node(NodeId(2), NodeType::Post, None)?
        .add_node(NodeId(3), NodeType::User, None)?
        .add_node(NodeId(4), NodeType::User, None)?;
    b.add_edge(NodeId(0), NodeId(2), EdgeType::NewsPost)?
        .add_edge(NodeId(1), NodeId(2), EdgeType::NewsPost)?
        .add_edge(NodeId(0), NodeId(3), EdgeType::NewsUser)?
        .add_edge(NodeId(2), NodeId(3), EdgeType::PostUser)?
        .add_edge(NodeId(2), NodeId(4), EdgeType::PostUser)?
        .add_edge(NodeId(3), NodeId(4), EdgeType::UserUser)?;
    let graph = b.build();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut features = FeatureStore::new();
    for (t, name, dim) in [
        (NodeType::News, "text", 5),
        (NodeType::News, "image", 3),
        (NodeType::Post, "text", 4),
        (NodeType::User, "profile", 6),
    ] {
        let mut table = EmbeddingTable::new(dim)?;
        for (id, _) in graph.nodes().filter(|(_, nt)| *nt == t) {
            let v = (0..dim).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x as f32).collect();
            table.insert(id, v)?;
        }
        features.insert(AttributeKey::new(t, name), table)?;
    }
    Ok(Dataset { graph, features })
}

/// Configuration of the full-model gradient check: `d = 8`, `gamma = 4`,
/// one layer, two heads, 64-bit.
pub fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.walk.top_gamma = 4;
    cfg.walk.iterations = 2000;
    cfg.model.unified_dim = 8;
    cfg.model.content_heads = 2;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.precision = Precision::F64;
    cfg
}

/// Central-difference check of every parameter of the full model on the
/// batch loss over all labeled news of `data`, dropout included.
pub fn model_grad_check(cfg: &ExperimentConfig, data: &Dataset, eps: f64) -> Result<crate::tensor::GradCheckReport> {
    use crate::tensor::{grad_check, Tape, Var};
    use rand::SeedableRng;

    let samples = sample_all(&data.graph, &cfg.walk, 1)?;
    let (model, mut store) = HetTransformerModel::new::<f64>(cfg.model_config(&data.features), cfg.train.seed)?;
    let labeled = data.labeled_news();
    let ids: Vec<NodeId> = labeled.iter().map(|p| p.0).collect();
    let targets: Vec<f64> = labeled.iter().map(|p| p.1.as_f64()).collect();
    let ctx = data.context(&samples);
    grad_check(&mut store, eps, |tape: &mut Tape<f64>, store: &ParamStore<f64>| -> Result<Var> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let pred = model.predict_batch(tape, store, ctx, &ids, true, &mut rng)?;
        Ok(tape.bce_mean(pred, &targets, None, train::BCE_EPS)?)
    })
}
