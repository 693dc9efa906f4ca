//! Loss, data splits, the SGD loop with early stopping, and evaluation metrics.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ModelError, Result};
use crate::graph::{NewsLabel, NodeId};
use crate::model::{GraphContext, HetTransformerModel};
use crate::rwr::root_seed;
use crate::tensor::{Gradients, ParamStore, Real, Sgd, Tape, Tensor};

/// Clamp applied to predictions inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Smallest labeled set [`split`] accepts.
pub const MIN_LABELED: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub test_fraction: f64,
    /// Share of the non-test remainder used for validation (4:1 gives 0.2).
    pub val_fraction: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Loss weight per class, indexed fake then real.
    pub class_weight: Option<[f64; 2]>,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            max_epochs: 40,
            patience: 5,
            test_fraction: 0.10,
            val_fraction: 0.20,
            seed: 42,
            batch_size: 32,
            momentum: 0.0,
            class_weight: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..1.0).contains(&x);
        // lr = 0 is allowed: it freezes every parameter
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if !frac(self.test_fraction) || !frac(self.val_fraction) {
            return Err(Error::Config("test_fraction and val_fraction must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if !frac(self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if let Some(w) = self.class_weight {
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Config("class weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Confusion counts as `<truth>_as_<prediction>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub fake_as_fake: usize,
    pub fake_as_real: usize,
    pub real_as_fake: usize,
    pub real_as_real: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: NewsLabel, predicted: NewsLabel) {
        match (truth, predicted) {
            (NewsLabel::Fake, NewsLabel::Fake) => self.fake_as_fake += 1,
            (NewsLabel::Fake, NewsLabel::Real) => self.fake_as_real += 1,
            (NewsLabel::Real, NewsLabel::Fake) => self.real_as_fake += 1,
            (NewsLabel::Real, NewsLabel::Real) => self.real_as_real += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.fake_as_fake + self.fake_as_real + self.real_as_fake + self.real_as_real
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion) -> Self {
        let class = |tp: usize, fp: usize, fn_: usize| {
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: tp + fn_,
            }
        };
        MetricsReport {
            accuracy: ratio(c.fake_as_fake + c.real_as_real, c.total()),
            fake: class(c.fake_as_fake, c.real_as_fake, c.fake_as_real),
            real: class(c.real_as_real, c.fake_as_real, c.real_as_fake),
            confusion: c,
        }
    }

    pub fn from_predictions(pairs: impl IntoIterator<Item = (NewsLabel, NewsLabel)>) -> Self {
        let mut c = Confusion::default();
        for (truth, predicted) in pairs {
            c.record(truth, predicted);
        }
        Self::from_confusion(c)
    }
}

/// `y >= 0.5` reads as real.
pub fn decide(prob_real: f64) -> NewsLabel {
    if prob_real >= 0.5 {
        NewsLabel::Real
    } else {
        NewsLabel::Fake
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

/// Splits `total` items of one class among parts of fixed `sizes` so that
/// every part receives `floor` or `ceil` of its proportional share.
fn apportion(class_count: usize, total: usize, sizes: &[usize]) -> Vec<usize> {
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * class_count as f64 / total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut left = class_count - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // largest fractional part first, ties to the earlier part
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if out[i] < sizes[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Stratified test / train / validation split.
///
/// The test set takes `round(test_fraction * n)` items and validation takes
/// `round(val_fraction * remainder)`; the rest trains. Each class is spread
/// over the three parts in proportion, rounded so that every part's class
/// ratio is within `1 / |part|` of the overall ratio.
pub fn split(labeled: &[(NodeId, NewsLabel)], cfg: &TrainConfig) -> Result<Split> {
    let n = labeled.len();
    if n < MIN_LABELED {
        return Err(Error::TooFewSamples {
            found: n,
            needed: MIN_LABELED,
        });
    }
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * (n - n_test) as f64).round() as usize;
    let n_train = n - n_test - n_val;
    let sizes = [n_test, n_train, n_val];

    let mut fake: Vec<NodeId> = labeled.iter().filter(|(_, l)| *l == NewsLabel::Fake).map(|p| p.0).collect();
    let mut real: Vec<NodeId> = labeled.iter().filter(|(_, l)| *l == NewsLabel::Real).map(|p| p.0).collect();
    fake.sort_unstable();
    real.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fake.shuffle(&mut rng);
    real.shuffle(&mut rng);

    let fake_parts = apportion(fake.len(), n, &sizes);
    let real_parts: Vec<usize> = sizes.iter().zip(&fake_parts).map(|(s, f)| s - f).collect();

    let mut parts: [Vec<NodeId>; 3] = Default::default();
    let (mut fi, mut ri) = (0, 0);
    for (k, part) in parts.iter_mut().enumerate() {
        part.extend_from_slice(&fake[fi..fi + fake_parts[k]]);
        part.extend_from_slice(&real[ri..ri + real_parts[k]]);
        fi += fake_parts[k];
        ri += real_parts[k];
        part.sort_unstable();
    }
    let [test, train, val] = parts;
    Ok(Split { train, val, test })
}

/// One line of the per-epoch run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1_fake: f64,
    pub val_f1_real: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub stopped_early: bool,
}

fn label_of(ctx: GraphContext<'_>, id: NodeId) -> Result<NewsLabel> {
    ctx.graph.label(id).ok_or_else(|| ModelError::MissingLabel(id).into())
}

fn item_seed(seed: u64, epoch: usize, id: NodeId) -> u64 {
    root_seed(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), id)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Probability of the real class for each id, in eval mode.
pub fn predict<T: Real>(
    model: &HetTransformerModel,
    store: &ParamStore<T>,
    ctx: GraphContext<'_>,
    ids: &[NodeId],
    workers: usize,
) -> Result<Vec<f64>> {
    let one = |&id: &NodeId| -> Result<f64> {
        let mut tape = Tape::new();
        // eval mode never draws from the RNG
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rep = model.represent(&mut tape, store, ctx, id, false, &mut rng)?;
        let y = model.head().predict(&mut tape, store, rep)?;
        Ok(tape.value(y).data()[0].f64())
    };
    pool(workers)?.install(|| ids.par_iter().map(one).collect())
}

pub fn evaluate<T: Real>(
    model: &HetTransformerModel,
    store: &ParamStore<T>,
    ctx: GraphContext<'_>,
    ids: &[NodeId],
    workers: usize,
) -> Result<MetricsReport> {
    let probs = predict(model, store, ctx, ids, workers)?;
    let pairs = ids
        .iter()
        .zip(probs)
        .map(|(&id, p)| Ok((label_of(ctx, id)?, decide(p))))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_predictions(pairs))
}

/// Loss and parameter gradients of one batch: the mean of per-item
/// cross-entropy terms. Items run on separate tapes in parallel and their
/// gradients are summed in batch order, so the result does not depend on the
/// number of workers.
pub fn batch_gradients<T: Real>(
    model: &HetTransformerModel,
    store: &ParamStore<T>,
    ctx: GraphContext<'_>,
    batch: &[NodeId],
    cfg: &TrainConfig,
    epoch: usize,
    pool: &rayon::ThreadPool,
) -> Result<(f64, Gradients<T>)> {
    let item = |&id: &NodeId| -> Result<(f64, Gradients<T>)> {
        let label = label_of(ctx, id)?;
        let y = T::of(label.as_f64());
        let w = cfg.class_weight.map(|w| [T::of(w[label as usize])]);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, id));
        let mut tape = Tape::new();
        let rep = model.represent(&mut tape, store, ctx, id, true, &mut rng)?;
        let pred = model.head().predict(&mut tape, store, rep)?;
        let loss = tape.bce_mean(pred, &[y], w.as_ref().map(|w| &w[..]), BCE_EPS)?;
        tape.backward(loss)?;
        Ok((tape.value(loss).data()[0].f64(), tape.param_grads(store)))
    };
    let parts: Vec<(f64, Gradients<T>)> = pool.install(|| batch.par_iter().map(item).collect::<Result<_>>())?;
    let mut total = Gradients::zeros_like(store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(T::of(inv));
    Ok((loss * inv, total))
}

/// Mini-batch SGD with early stopping on validation accuracy.
///
/// On return `store` holds the parameters of the best validation epoch,
/// rounded to checkpoint precision, and the reported test metrics are those
/// of exactly these parameters.
pub fn train<T: Real>(
    model: &HetTransformerModel,
    store: &mut ParamStore<T>,
    ctx: GraphContext<'_>,
    split: &Split,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::TooFewSamples { found: 0, needed: 1 });
    }
    for &id in split.train.iter().chain(&split.val).chain(&split.test) {
        if !ctx.samples.contains_key(&id) && model.transformer().is_some() {
            return Err(ModelError::MissingSample(id).into());
        }
        label_of(ctx, id)?;
    }
    let workers = pool(cfg.workers)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order = split.train.clone();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor<T>>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, NodeId(u64::MAX)));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(model, store, ctx, batch, cfg, epoch, &workers)?;
            opt.step(store, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let val = evaluate(model, store, ctx, &split.val, cfg.workers)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_acc: val.accuracy,
            val_f1_fake: val.fake.f1,
            val_f1_real: val.real.f1,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            writeln!(w)?;
        }
        epochs.push(entry);

        if best.as_ref().is_none_or(|b| val.accuracy > b.1) {
            best = Some((epoch, val.accuracy, store.snapshot()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience && epoch < cfg.max_epochs {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_acc, snapshot) = best.expect("at least one epoch ran");
    store.restore(&snapshot);
    *store = store.cast::<f32>().cast::<T>();
    let val = evaluate(model, store, ctx, &split.val, cfg.workers)?;
    let test = evaluate(model, store, ctx, &split.test, cfg.workers)?;
    Ok(TrainRun {
        epochs,
        best_epoch,
        best_val_acc,
        val,
        test,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize, fake: usize) -> Vec<(NodeId, NewsLabel)> {
        (0..n)
            .map(|i| (NodeId(i as u64), if i < fake { NewsLabel::Fake } else { NewsLabel::Real }))
            .collect()
    }

    #[test]
    fn hundred_news_split_sizes() {
        let s = split(&ids(100, 40), &TrainConfig::default()).unwrap();
        assert_eq!((s.test.len(), s.train.len(), s.val.len()), (10, 72, 18));
    }

    #[test]
    fn split_is_a_disjoint_stratified_cover() {
        for (n, fake) in [(10, 3), (37, 11), (100, 40), (501, 250), (64, 1)] {
            let all = ids(n, fake);
            let s = split(&all, &TrainConfig::default()).unwrap();
            let mut seen: Vec<NodeId> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, all.iter().map(|p| p.0).collect::<Vec<_>>());
            let overall = fake as f64 / n as f64;
            for part in [&s.train, &s.val, &s.test] {
                if part.is_empty() {
                    continue;
                }
                let f = part.iter().filter(|id| (id.0 as usize) < fake).count();
                let r = f as f64 / part.len() as f64;
                assert!((r - overall).abs() <= 1.0 / part.len() as f64, "n={n} fake={fake}");
            }
        }
    }

    #[test]
    fn both_classes_in_every_part_when_possible() {
        let s = split(&ids(100, 40), &TrainConfig::default()).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let f = part.iter().filter(|id| id.0 < 40).count();
            assert!(f > 0 && f < part.len());
        }
    }

    #[test]
    fn split_is_seed_deterministic() {
        let all = ids(80, 30);
        let cfg = TrainConfig::default();
        assert_eq!(split(&all, &cfg).unwrap(), split(&all, &cfg).unwrap());
        let other = TrainConfig { seed: 7, ..cfg.clone() };
        assert_ne!(split(&all, &cfg).unwrap(), split(&all, &other).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            split(&ids(9, 4), &TrainConfig::default()),
            Err(Error::TooFewSamples { found: 9, needed: 10 })
        ));
    }

    #[test]
    fn perfect_predictions() {
        let m = MetricsReport::from_predictions([
            (NewsLabel::Fake, NewsLabel::Fake),
            (NewsLabel::Real, NewsLabel::Real),
            (NewsLabel::Real, NewsLabel::Real),
        ]);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!((m.fake.f1, m.real.f1), (1.0, 1.0));
        assert_eq!((m.fake.support, m.real.support), (1, 2));
    }

    #[test]
    fn metrics_by_hand() {
        // 3 fake (2 caught), 5 real (1 flagged as fake)
        let c = Confusion {
            fake_as_fake: 2,
            fake_as_real: 1,
            real_as_fake: 1,
            real_as_real: 4,
        };
        let m = MetricsReport::from_confusion(c);
        assert!((m.accuracy - 6.0 / 8.0).abs() < 1e-15);
        assert!((m.fake.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.fake.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.real.precision - 4.0 / 5.0).abs() < 1e-15);
        assert!((m.real.recall - 4.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_precision_is_zero() {
        let m = MetricsReport::from_predictions([(NewsLabel::Real, NewsLabel::Real)]);
        assert_eq!(m.fake, ClassMetrics::default());
        assert_eq!(f1_score(0.0, 0.0), 0.0);
    }

    #[test]
    fn decision_threshold() {
        assert_eq!(decide(0.5), NewsLabel::Real);
        assert_eq!(decide(0.4999), NewsLabel::Fake);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { test_fraction: 1.0, ..Default::default() }.validate().is_err());
    }
}
