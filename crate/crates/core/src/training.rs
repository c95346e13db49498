//! SGD with per-epoch cosine decay, the epoch loop, metrics, and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, BatchPlan, BatchSampler, DatasetSpec, DomainSample};
use crate::error::{Error, Result};
use crate::model::{self, CheckpointMeta, Mode, ModelSpec, ParameterSet, StyleOp};
use crate::regularizers::{self, XdedConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Mixstyle,
    Xded,
    XdedUnistyle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Mixstyle, Method::Xded, Method::XdedUnistyle];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mixstyle => "mixstyle",
            Method::Xded => "xded",
            Method::XdedUnistyle => "xded_unistyle",
        }
    }

    pub fn uses_xded(self) -> bool {
        matches!(self, Method::Xded | Method::XdedUnistyle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::param("method", format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub xded: XdedConfig,
    pub lr0: f64,
    pub epochs: usize,
    pub batch: BatchPlan,
    /// Insertion points that get UniStyle under `xded_unistyle`.
    pub unistyle_points: Vec<usize>,
    /// Insertion points that get MixStyle under `mixstyle`.
    pub mixstyle_points: Vec<usize>,
    pub seed: u64,
    pub eval_every: usize,
    /// Conv block widths of the classifier.
    pub blocks: Vec<usize>,
    /// Write measured wall-clock time into the metrics; off keeps
    /// `metrics.jsonl` byte-reproducible (`wall_ms` is then 0).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Xded,
            xded: XdedConfig::default(),
            lr0: 1e-3,
            epochs: 100,
            batch: BatchPlan::default(),
            unistyle_points: vec![1],
            mixstyle_points: vec![1],
            seed: 0,
            eval_every: 1,
            blocks: vec![16, 32],
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::param("lr0", format!("must be > 0, got {}", self.lr0)));
        }
        if self.eval_every == 0 {
            return Err(Error::param("eval_every", "must be at least 1"));
        }
        self.xded.validate()?;
        self.batch.validate()?;
        for (name, points) in [("unistyle_points", &self.unistyle_points), ("mixstyle_points", &self.mixstyle_points)] {
            if let Some(p) = points.iter().find(|&&p| p == 0 || p > self.blocks.len()) {
                return Err(Error::param(name, format!("insertion point {p} outside 1..={}", self.blocks.len())));
            }
        }
        Ok(())
    }

    /// Classifier layout implied by the method and insertion points.
    pub fn model_spec(&self, num_classes: usize) -> ModelSpec {
        let (op, points) = match self.method {
            Method::Vanilla | Method::Xded => (StyleOp::None, &[][..]),
            Method::Mixstyle => (StyleOp::Mixstyle, &self.mixstyle_points[..]),
            Method::XdedUnistyle => (StyleOp::Unistyle, &self.unistyle_points[..]),
        };
        ModelSpec {
            blocks: self.blocks.clone(),
            num_classes,
            style_ops: points.iter().map(|&p| (p, op)).collect(),
            ..ModelSpec::default()
        }
    }
}

/// Half-cosine decay from `lr0` at `t = 0` to 0 at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::param("t", format!("{t} exceeds schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    let progress = t as f64 / total as f64;
    Ok((0.5 * lr0 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

/// Plain gradient descent `θ ← θ − lr·∇`. Nothing is updated if any
/// gradient is non-finite.
pub fn sgd_step(params: &mut ParameterSet, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        if g.len() != t.numel() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: t.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                name: name.clone(),
            });
        }
    }
    for (name, t) in params.iter_mut() {
        for (w, g) in t.data_mut().iter_mut().zip(&grads[name]) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// One evaluated epoch, serialised as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub xded_loss: f64,
    pub train_acc: f64,
    pub target_acc: f64,
    pub mean_prediction_entropy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` whose argmax equals the label.
pub fn accuracy_from_logits(logits: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .chunks(num_classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn accuracy(params: &ParameterSet, spec: &ModelSpec, samples: &[DomainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let logits = model::eval_logits(params, spec, &data::stack_images(samples)?)?;
    Ok(accuracy_from_logits(logits.data(), spec.num_classes, &data::labels_of(samples)))
}

/// Mean Shannon entropy (nats) of the temperature-1 predictive distribution.
pub fn mean_entropy_from_logits(logits: &[f64], num_classes: usize) -> f64 {
    let rows = logits.len() / num_classes;
    let mut total = 0.0;
    for row in logits.chunks(num_classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        total -= exps
            .iter()
            .map(|&e| e / norm)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    total / rows as f64
}

pub fn entropy_of_predictions(params: &ParameterSet, spec: &ModelSpec, samples: &[DomainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("entropy of an empty sample set".into()));
    }
    let logits = model::eval_logits(params, spec, &data::stack_images(samples)?)?;
    Ok(mean_entropy_from_logits(logits.data(), spec.num_classes))
}

/// Where and how a run persists its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub config_hash: String,
    pub dataset: Option<DatasetSpec>,
    pub target_domain: Option<usize>,
    pub source_domain: Option<usize>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_GOOD_CKPT: &str = "last_good.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub best_target_acc: f64,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.metrics.last()
    }
}

struct Sink<'a> {
    out: &'a RunOutput,
    metrics: std::fs::File,
    seed: u64,
    spec: ModelSpec,
}

impl Sink<'_> {
    fn checkpoint(&self, name: &str, epoch: usize, params: &ParameterSet) -> Result<PathBuf> {
        let meta = CheckpointMeta {
            spec: self.spec.clone(),
            epoch,
            seed: self.seed,
            config_hash: self.out.config_hash.clone(),
            dataset: self.out.dataset.clone(),
            target_domain: self.out.target_domain,
            source_domain: self.out.source_domain,
        };
        let path = self.out.dir.join(name);
        model::save_checkpoint(&path, &meta, params)?;
        Ok(path)
    }

    fn record(&mut self, rec: &MetricsRecord) -> Result<()> {
        let path = self.out.dir.join(METRICS_FILE);
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.metrics.write_all(&line).map_err(|e| Error::io(&path, e))
    }
}

/// Leave-one-domain-out training on a generated dataset.
pub fn train(
    config: &TrainConfig,
    dataset: &DatasetSpec,
    target_domain: usize,
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    let (train_set, target_set) = protocol_split(dataset, Some(target_domain), None)?;
    train_on(config, dataset.num_classes, &train_set, &target_set, out)
}

/// `(train, evaluation)` samples of a run: leave-one-domain-out when a
/// target is given, otherwise single-source with every other domain as the
/// evaluation set.
pub fn protocol_split(
    dataset: &DatasetSpec,
    target_domain: Option<usize>,
    source_domain: Option<usize>,
) -> Result<(Vec<DomainSample>, Vec<DomainSample>)> {
    let samples = data::generate_dataset(dataset)?;
    match (target_domain, source_domain) {
        (Some(t), None) => data::leave_one_domain_out(&samples, t),
        (None, Some(s)) => data::single_source_split(&samples, s),
        _ => Err(Error::Contract("exactly one of target and source domain must be set".into())),
    }
}

/// Train on explicit source samples, evaluating on `target_set`.
///
/// Each epoch runs `floor(|train| / batch_size)` independently drawn
/// class-balanced batches; the learning rate of epoch `e` is
/// `cosine_lr(e, epochs, lr0)`.
pub fn train_on(
    config: &TrainConfig,
    num_classes: usize,
    train_set: &[DomainSample],
    target_set: &[DomainSample],
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.model_spec(num_classes);
    spec.validate()?;
    let mut params = model::init_parameters(&spec, config.seed)?;
    let mut sink = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.dir.join(METRICS_FILE);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            Some(Sink {
                out: o,
                metrics: file,
                seed: config.seed,
                spec: spec.clone(),
            })
        }
        None => None,
    };

    let mut checkpoints = Vec::new();
    let mut metrics = Vec::new();
    let mut best_target_acc = f64::NEG_INFINITY;

    if config.epochs == 0 {
        if let Some(s) = &sink {
            checkpoints.push(s.checkpoint(FINAL_CKPT, 0, &params)?);
            checkpoints.push(s.checkpoint(BEST_CKPT, 0, &params)?);
        }
        return Ok(TrainOutcome {
            spec,
            params,
            metrics,
            checkpoints,
            best_target_acc: 0.0,
        });
    }

    let sampler = BatchSampler::new(train_set, config.batch.clone())?;
    let batches_per_epoch = (train_set.len() / config.batch.batch_size).max(1);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut style_rng = ChaCha8Rng::seed_from_u64(config.seed);
    style_rng.set_stream(2);
    let train_images = data::stack_images(train_set)?;
    let target_images = data::stack_images(target_set)?;
    let target_labels = data::labels_of(target_set);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, config.epochs, config.lr0)?;
        let (mut loss_sum, mut ce_sum, mut xded_sum, mut hits) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..batches_per_epoch {
            let batch = sampler.sample(&mut data_rng)?;
            let mut tape = Tape::new();
            let vars = params.attach(&mut tape, true);
            let x = tape.constant(batch.images);
            let fwd = model::forward(&mut tape, &vars, &spec, x, Mode::Train(&mut style_rng))?;
            let terms = if config.method.uses_xded() {
                regularizers::total_loss(&mut tape, fwd.logits, &batch.labels, &batch.groups, &config.xded)?
            } else {
                let ce = regularizers::cross_entropy(&mut tape, fwd.logits, &batch.labels)?;
                regularizers::LossTerms {
                    total: ce,
                    ce,
                    xded: None,
                }
            };
            let loss = tape.data(terms.total)[0];
            if !loss.is_finite() {
                if let Some(s) = &sink {
                    s.checkpoint(LAST_GOOD_CKPT, epoch, &params)?;
                }
                return Err(Error::NonFinite {
                    what: "loss",
                    name: format!("epoch {epoch}"),
                });
            }
            loss_sum += loss;
            ce_sum += tape.data(terms.ce)[0];
            xded_sum += terms.xded.map_or(0.0, |v| tape.data(v)[0]);
            hits += accuracy_from_logits(tape.data(fwd.logits), num_classes, &batch.labels);
            tape.backward(terms.total)?;
            let grads: BTreeMap<String, Vec<f64>> = vars
                .iter()
                .map(|(name, &v)| (name.clone(), tape.grad(v).unwrap_or_default().to_vec()))
                .collect();
            if let Err(e) = sgd_step(&mut params, &grads, lr) {
                if let Some(s) = &sink {
                    s.checkpoint(LAST_GOOD_CKPT, epoch, &params)?;
                }
                return Err(e);
            }
        }

        let last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.eval_every != 0 && !last {
            continue;
        }
        let (target_logits, _) = model::evaluate(&params, &spec, &target_images)?;
        let target_acc = accuracy_from_logits(target_logits.data(), num_classes, &target_labels);
        let (train_logits, _) = model::evaluate(&params, &spec, &train_images)?;
        let entropy = mean_entropy_from_logits(train_logits.data(), num_classes);
        let n = batches_per_epoch as f64;
        let record = MetricsRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            ce_loss: ce_sum / n,
            xded_loss: xded_sum / n,
            train_acc: hits / n,
            target_acc,
            mean_prediction_entropy: entropy,
            lr,
            wall_ms: if config.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let Some(s) = &mut sink {
            s.record(&record)?;
            if target_acc > best_target_acc {
                let path = s.checkpoint(BEST_CKPT, epoch + 1, &params)?;
                if !checkpoints.contains(&path) {
                    checkpoints.push(path);
                }
            }
        }
        best_target_acc = best_target_acc.max(target_acc);
        metrics.push(record);
    }
    if let Some(s) = &sink {
        checkpoints.push(s.checkpoint(FINAL_CKPT, config.epochs, &params)?);
    }
    Ok(TrainOutcome {
        spec,
        params,
        metrics,
        checkpoints,
        best_target_acc,
    })
}

/// Read a `metrics.jsonl` file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
