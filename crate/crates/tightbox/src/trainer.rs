//! Adam training under the MIL loss (or per-pixel CE for full supervision).
//!
//! The direct-logit model has no shared weights, so it is fitted per sample:
//! every sample gets its own logit map and optimizer state, and all maps are
//! stepped in lockstep so one log row covers one iteration across samples.
//! The tiny-conv model is shared; each iteration draws `batch_size` samples
//! from a seeded shuffle, averages their gradients and takes one Adam step.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tightbox_core::milloss::{self, PreparedBags};
use tightbox_core::optim::adam_step;
use tightbox_core::segmodel::forward;
use tightbox_core::synth::Sample;
use tightbox_core::{AdamState, BagScheme, CategoryBags, Graph, ModelKind, ModelParams, Tensor};

use crate::config::{ExperimentConfig, Supervision};
use crate::error::{Error, Result};
use crate::formats::{self, CheckpointFile, CHECKPOINT_FORMAT, FORMAT_VERSION};

/// Prepared bags keyed by (sample, category, scheme), built on first use.
#[derive(Debug, Default)]
pub struct BagCache {
    map: Mutex<HashMap<(String, usize, String), Arc<PreparedBags>>>,
    builds: AtomicUsize,
}

impl BagCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times bag geometry has actually been generated.
    pub fn builds(&self) -> usize {
        self.builds.load(Ordering::Relaxed)
    }

    pub fn get(&self, sample: &Sample, category: usize, scheme: &BagScheme) -> Result<Arc<PreparedBags>> {
        let key = (sample.id.clone(), category, scheme_key(scheme));
        if let Some(b) = self.map.lock().expect("bag cache poisoned").get(&key) {
            return Ok(b.clone());
        }
        let (h, w) = (sample.image.height, sample.image.width);
        let bags = CategoryBags::build(&sample.boxes, category, h, w, scheme)?;
        let prepared = Arc::new(PreparedBags::new(&bags, w));
        self.builds.fetch_add(1, Ordering::Relaxed);
        let mut map = self.map.lock().expect("bag cache poisoned");
        Ok(map.entry(key).or_insert(prepared).clone())
    }

    pub fn for_sample(&self, sample: &Sample, scheme: &BagScheme) -> Result<Vec<Arc<PreparedBags>>> {
        (1..=sample.categories()).map(|c| self.get(sample, c, scheme)).collect()
    }
}

fn scheme_key(scheme: &BagScheme) -> String {
    match scheme {
        BagScheme::Baseline => "baseline".into(),
        BagScheme::Generalized { angles } => angles.to_string(),
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub total: f64,
    /// Per category; for full supervision `unary` holds the pixel CE and `pairwise` is 0.
    pub unary: Vec<f64>,
    pub pairwise: Vec<f64>,
    pub wall_ms: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub categories: usize,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(categories: usize) -> Self {
        Self { categories, records: Vec::new() }
    }

    pub fn push(&mut self, record: LogRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.iteration < record.iteration));
        self.records.push(record);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "iteration,total_loss")?;
        for c in 1..=self.categories {
            write!(out, ",unary_c{c},pairwise_c{c}")?;
        }
        writeln!(out, ",wall_ms")?;
        for r in &self.records {
            write!(out, "{},{:e}", r.iteration, r.total)?;
            for (u, p) in r.unary.iter().zip(&r.pairwise) {
                write!(out, ",{u:e},{p:e}")?;
            }
            writeln!(out, ",{:.3}", r.wall_ms)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Trained parameters: one shared model, or one logit map per sample id.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Shared(ModelParams),
    PerSample(Vec<(String, ModelParams)>),
}

/// A trained model together with the geometry it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn params_for(&self, sample_id: &str) -> Result<&ModelParams> {
        match &self.model {
            TrainedModel::Shared(p) => Ok(p),
            TrainedModel::PerSample(v) => v
                .iter()
                .find(|(id, _)| id == sample_id)
                .map(|(_, p)| p)
                .ok_or_else(|| Error::MissingModel(sample_id.to_string())),
        }
    }

    /// `[C, H, W]` probabilities for one sample.
    pub fn predict(&self, sample: &Sample) -> Result<Tensor> {
        let params = self.params_for(&sample.id)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let y = forward(&mut g, params, &bound, &sample.image)?;
        Ok(g.value(y).clone())
    }

    pub fn to_file(&self) -> CheckpointFile {
        let models = match &self.model {
            TrainedModel::Shared(p) => vec![formats::entry_from_params(None, p)],
            TrainedModel::PerSample(v) => v.iter().map(|(id, p)| formats::entry_from_params(Some(id.clone()), p)).collect(),
        };
        CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            model_kind: self.kind,
            categories: self.categories,
            height: self.height,
            width: self.width,
            models,
        }
    }

    pub fn from_file(f: &CheckpointFile) -> Result<Self> {
        if f.format != CHECKPOINT_FORMAT || f.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint {} v{}", f.format, f.version)));
        }
        let mut entries = Vec::with_capacity(f.models.len());
        for e in &f.models {
            entries.push((e.sample_id.clone(), formats::params_from_entry(f.model_kind, f.categories, e)?));
        }
        let model = match f.model_kind {
            ModelKind::TinyConv => match entries.pop() {
                Some((None, p)) if entries.is_empty() => TrainedModel::Shared(p),
                _ => return Err(Error::Invalid("tiny-conv checkpoint must hold one shared entry".into())),
            },
            ModelKind::DirectLogit => TrainedModel::PerSample(
                entries
                    .into_iter()
                    .map(|(id, p)| id.map(|id| (id, p)).ok_or_else(|| Error::Invalid("direct-logit entry without sample_id".into())))
                    .collect::<Result<_>>()?,
            ),
        };
        let want = [f.categories, f.height, f.width];
        let maps: Vec<(&str, &ModelParams)> = match &model {
            TrainedModel::PerSample(v) => v.iter().map(|(id, p)| (id.as_str(), p)).collect(),
            TrainedModel::Shared(_) => Vec::new(),
        };
        if let Some((id, _)) = maps.iter().find(|(_, p)| p.tensors()[0].shape() != want) {
            return Err(Error::Invalid(format!("logit map for {id} is not {want:?}")));
        }
        Ok(Self { kind: f.model_kind, categories: f.categories, height: f.height, width: f.width, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&formats::read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    /// Bag geometry builds during this run.
    pub bag_builds: usize,
}

struct StepResult {
    total: f64,
    unary: Vec<f64>,
    pairwise: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn loss_and_grads(
    params: &ModelParams,
    sample: &Sample,
    bags: &[Arc<PreparedBags>],
    cfg: &ExperimentConfig,
    iteration: usize,
) -> Result<StepResult> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let probs = forward(&mut g, params, &bound, &sample.image)?;
    let c = params.categories();
    let (root, unary, pairwise) = match cfg.supervision {
        Supervision::Full => {
            let l = milloss::pixel_bce(&mut g, probs, &sample.mask_targets(), cfg.loss.epsilon)?;
            let mut unary = vec![0.0; c];
            unary[0] = g.value(l).item();
            (l, unary, vec![0.0; c])
        }
        Supervision::Boxes => {
            let prepared: Vec<PreparedBags> = bags.iter().map(|b| (**b).clone()).collect();
            let br = milloss::total_loss(&mut g, probs, &prepared, &cfg.loss)?;
            let mut unary = vec![0.0; c];
            let mut pairwise = vec![0.0; c];
            for (cat, u, p) in &br.per_category {
                unary[cat - 1] = g.value(*u).item();
                pairwise[cat - 1] = g.value(*p).item();
            }
            (br.total, unary, pairwise)
        }
    };
    let total = g.value(root).item();
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss { sample: sample.id.clone(), iteration });
    }
    g.backward(root)?;
    let grads = bound
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]))
        .collect();
    Ok(StepResult { total, unary, pairwise, grads })
}

fn check_samples(samples: &[&Sample]) -> Result<(usize, usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::Invalid("no samples to train on".into()))?;
    let dims = (first.categories(), first.image.height, first.image.width);
    if samples.iter().any(|s| (s.categories(), s.image.height, s.image.width) != dims) {
        return Err(Error::Invalid("samples differ in size or category count".into()));
    }
    Ok(dims)
}

/// Trains on `samples` with a fresh bag cache.
pub fn train(samples: &[&Sample], cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with_cache(samples, cfg, &BagCache::new())
}

pub fn train_with_cache(samples: &[&Sample], cfg: &ExperimentConfig, cache: &BagCache) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (categories, height, width) = check_samples(samples)?;
    let before = cache.builds();
    let bags: Vec<Vec<Arc<PreparedBags>>> = match cfg.supervision {
        Supervision::Boxes => samples.iter().map(|s| cache.for_sample(s, &cfg.bags)).collect::<Result<_>>()?,
        Supervision::Full => vec![Vec::new(); samples.len()],
    };
    let (model, log) = match cfg.model {
        ModelKind::DirectLogit => train_per_sample(samples, &bags, cfg, categories, height, width)?,
        ModelKind::TinyConv => train_shared(samples, &bags, cfg, categories, height, width)?,
    };
    let checkpoint = Checkpoint { kind: cfg.model, categories, height, width, model };
    Ok(TrainOutcome { checkpoint, log, bag_builds: cache.builds() - before })
}

fn train_per_sample(
    samples: &[&Sample],
    bags: &[Vec<Arc<PreparedBags>>],
    cfg: &ExperimentConfig,
    categories: usize,
    height: usize,
    width: usize,
) -> Result<(TrainedModel, RunLog)> {
    let mut states = samples
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let p = ModelParams::init(ModelKind::DirectLogit, categories, height, width, cfg.optim.seed.wrapping_add(k as u64))?;
            let st = AdamState::new(p.tensors());
            Ok((p, st))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = RunLog::new(categories);
    let start = Instant::now();
    for it in 0..cfg.optim.iterations {
        let steps: Vec<Result<StepResult>> = states
            .par_iter_mut()
            .enumerate()
            .map(|(k, (params, state))| {
                let r = loss_and_grads(params, samples[k], &bags[k], cfg, it)?;
                adam_step(&mut params.tensors_mut(), &r.grads, state, &cfg.optim)?;
                Ok(r)
            })
            .collect();
        let mut rec = LogRecord {
            iteration: it,
            total: 0.0,
            unary: vec![0.0; categories],
            pairwise: vec![0.0; categories],
            wall_ms: 0.0,
        };
        for r in steps {
            let r = r?;
            rec.total += r.total;
            accumulate(&mut rec.unary, &r.unary);
            accumulate(&mut rec.pairwise, &r.pairwise);
        }
        let n = samples.len() as f64;
        rec.total /= n;
        rec.unary.iter_mut().chain(rec.pairwise.iter_mut()).for_each(|v| *v /= n);
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log.push(rec);
    }
    let model = TrainedModel::PerSample(samples.iter().zip(states).map(|(s, (p, _))| (s.id.clone(), p)).collect());
    Ok((model, log))
}

fn accumulate(acc: &mut [f64], xs: &[f64]) {
    acc.iter_mut().zip(xs).for_each(|(a, x)| *a += x);
}

fn train_shared(
    samples: &[&Sample],
    bags: &[Vec<Arc<PreparedBags>>],
    cfg: &ExperimentConfig,
    categories: usize,
    height: usize,
    width: usize,
) -> Result<(TrainedModel, RunLog)> {
    let mut params = ModelParams::init(ModelKind::TinyConv, categories, height, width, cfg.optim.seed)?;
    let mut state = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed ^ 0x5eed_ba7c);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut log = RunLog::new(categories);
    let start = Instant::now();
    for it in 0..cfg.optim.iterations {
        let mut batch = Vec::with_capacity(cfg.optim.batch_size);
        while batch.len() < cfg.optim.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<StepResult>> =
            batch.par_iter().map(|&k| loss_and_grads(&params, samples[k], &bags[k], cfg, it)).collect();
        let n = batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut rec = LogRecord {
            iteration: it,
            total: 0.0,
            unary: vec![0.0; categories],
            pairwise: vec![0.0; categories],
            wall_ms: 0.0,
        };
        for r in results {
            let r = r?;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                accumulate(acc, g);
            }
            rec.total += r.total;
            accumulate(&mut rec.unary, &r.unary);
            accumulate(&mut rec.pairwise, &r.pairwise);
        }
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        rec.total /= n;
        rec.unary.iter_mut().chain(rec.pairwise.iter_mut()).for_each(|v| *v /= n);
        adam_step(&mut params.tensors_mut(), &grads, &mut state, &cfg.optim)?;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log.push(rec);
    }
    Ok((TrainedModel::Shared(params), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tightbox_core::synth::{generate, DatasetSpec};
    use tightbox_core::{AngleSet, BagReduce, LossConfig, OptimConfig};

    fn data(n: usize) -> Vec<Sample> {
        let spec = DatasetSpec { n_train: n, n_val: 0, height: 24, width: 24, radius: (4.0, 7.0), ..DatasetSpec::default() };
        generate(&spec).unwrap()
    }

    fn cfg(model: ModelKind, iterations: usize) -> ExperimentConfig {
        ExperimentConfig {
            model,
            optim: OptimConfig { lr: 0.05, iterations, ..OptimConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn cache_builds_once_per_key() {
        let samples = data(2);
        let cache = BagCache::new();
        let gen = BagScheme::Generalized { angles: AngleSet::new(-20.0, 20.0, 20.0).unwrap() };
        for _ in 0..3 {
            for s in &samples {
                cache.for_sample(s, &BagScheme::Baseline).unwrap();
                cache.for_sample(s, &gen).unwrap();
            }
        }
        assert_eq!(cache.builds(), 4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let out = train_with_cache(&refs, &cfg(ModelKind::DirectLogit, 3), &cache).unwrap();
        assert_eq!(out.bag_builds, 0);
    }

    #[test]
    fn zero_iterations_returns_init() {
        let samples = data(2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let out = train(&refs, &cfg(ModelKind::TinyConv, 0)).unwrap();
        assert!(out.log.records.is_empty());
        let init = ModelParams::init(ModelKind::TinyConv, 1, 24, 24, 0).unwrap();
        assert_eq!(out.checkpoint.model, TrainedModel::Shared(init));
    }

    #[test]
    fn direct_logit_loss_decreases() {
        let samples = data(1);
        let mut c = cfg(ModelKind::DirectLogit, 500);
        c.optim.lr = 0.01;
        let out = train(&[&samples[0]], &c).unwrap();
        let l = out.log.losses();
        let ups = l.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(ups as f64 <= 0.05 * (l.len() - 1) as f64, "{ups} non-decreasing steps");
        for w in l.windows(101) {
            assert!(w[100] < w[0]);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let samples = data(3);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut c = cfg(ModelKind::TinyConv, 6);
        c.optim.batch_size = 2;
        c.loss = LossConfig { bag_reduce: BagReduce::AlphaQuasimax, alpha: Some(6.0), ..LossConfig::default() };
        let a = train(&refs, &c).unwrap();
        let b = train(&refs, &c).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.losses(), b.log.losses());
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let samples = data(2);
        let refs: Vec<&Sample> = samples.iter().collect();
        for kind in [ModelKind::DirectLogit, ModelKind::TinyConv] {
            let out = train(&refs, &cfg(kind, 2)).unwrap();
            let back = Checkpoint::from_file(&out.checkpoint.to_file()).unwrap();
            assert_eq!(back, out.checkpoint);
        }
        let out = train(&refs[..1], &cfg(ModelKind::DirectLogit, 1)).unwrap();
        assert!(matches!(out.checkpoint.predict(&samples[1]), Err(Error::MissingModel(_))));
    }

    #[test]
    fn log_csv_layout() {
        let mut log = RunLog::new(2);
        log.push(LogRecord { iteration: 0, total: 1.5, unary: vec![0.5, 0.25], pairwise: vec![0.0, 0.75], wall_ms: 1.0 });
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next().unwrap(), "iteration,total_loss,unary_c1,pairwise_c1,unary_c2,pairwise_c2,wall_ms");
        assert_eq!(lines.next().unwrap().split(',').count(), 7);
    }
}
