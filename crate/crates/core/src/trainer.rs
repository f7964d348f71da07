//! Single-pass online training: the method variants, the replay buffer, and
//! task-wise evaluation.
//!
//! [`Learner::observe`] sees one batch of features and labels and nothing
//! else; task indices never reach it. [`train_stream`] drives a learner over
//! a [`TaskStream`] and uses task indices only to schedule evaluation.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgh::{AlphaSummary, BaseOptimizer, Fgh, FghConfig, OptimizerKind};
use crate::metrics::{self, AccuracyMatrix, GradNormLog};
use crate::model::{
    self, argmax_rows, masked_cross_entropy, unique_labels, ClassSet, GradientSet, ModelParams,
    FC_BIAS, FC_WEIGHT,
};
use crate::numkit::{Matrix, Rng};
use crate::prototypes::{proto_loss, PrototypeBank, ProtoNorm};
use crate::stream::{Dataset, Sample, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FineTune,
    LinearProbe,
    Er,
    ErLinearProbe,
    Proto,
    Fgh,
    ProtoFgh,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FineTune,
        Method::LinearProbe,
        Method::Er,
        Method::ErLinearProbe,
        Method::Proto,
        Method::Fgh,
        Method::ProtoFgh,
    ];

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Method::Proto | Method::ProtoFgh)
    }

    pub fn uses_fgh(self) -> bool {
        matches!(self, Method::Fgh | Method::ProtoFgh)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Method::Er | Method::ErLinearProbe)
    }

    pub fn is_linear_probe(self) -> bool {
        matches!(self, Method::LinearProbe | Method::ErLinearProbe)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::FineTune => "fine_tune",
            Method::LinearProbe => "linear_probe",
            Method::Er => "er",
            Method::ErLinearProbe => "er_linear_probe",
            Method::Proto => "proto",
            Method::Fgh => "fgh",
            Method::ProtoFgh => "proto_fgh",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub retrieve_count: usize,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1000,
            retrieve_count: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub fgh: FghConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    /// Freeze every non-FC tensor regardless of `method`.
    #[serde(default)]
    pub linear_probe: bool,
    #[serde(default = "yes")]
    pub eval_after_each_task: bool,
    #[serde(default)]
    pub proto_norm: ProtoNorm,
    #[serde(default)]
    pub log_alpha: bool,
}

fn yes() -> bool {
    true
}

impl MethodConfig {
    /// Adam base optimizer, class-wise FGH defaults, 1000/100 replay.
    pub fn new(method: Method, lr: f64) -> Self {
        Self {
            method,
            optimizer: OptimizerKind::adam(lr),
            fgh: FghConfig::default(),
            replay: ReplayConfig::default(),
            linear_probe: false,
            eval_after_each_task: true,
            proto_norm: ProtoNorm::default(),
            log_alpha: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.optimizer.lr()
    }

    pub fn freezes_extractor(&self) -> bool {
        self.linear_probe || self.method.is_linear_probe()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr())));
        }
        if self.method.uses_replay() && self.replay.capacity < self.replay.retrieve_count {
            return Err(Error::Config(format!(
                "replay capacity {} < retrieve_count {}",
                self.replay.capacity, self.replay.retrieve_count
            )));
        }
        self.fgh.validate()
    }
}

/// Bounded sample store filled by reservoir sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Sample>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn items(&self) -> &[Sample] {
        &self.items
    }

    pub fn reservoir_insert(&mut self, sample: Sample, rng: &mut Rng) {
        if self.items.len() < self.capacity {
            self.items.push(sample);
        } else if self.capacity > 0 {
            let u = (rng.next_u64() % (self.seen + 1)) as usize;
            if u < self.capacity {
                self.items[u] = sample;
            }
        }
        self.seen += 1;
    }

    /// Up to `k` distinct stored samples drawn uniformly.
    pub fn retrieve(&self, k: usize, rng: &mut Rng) -> Vec<&Sample> {
        rng.sample_indices(self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub loss_base: f64,
    pub loss_proto: f64,
    pub loss_replay: f64,
    /// Post-reweight FC gradient norm per class.
    pub class_norms: Vec<f64>,
    pub alpha: Vec<AlphaSummary>,
}

/// Gradients of each loss term for one batch, before reweighting.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss_base: f64,
    pub loss_proto: f64,
    pub loss_replay: f64,
    pub base: GradientSet,
    pub proto: Option<GradientSet>,
    pub replay: Option<GradientSet>,
    pub total: GradientSet,
    pub features: Matrix,
}

/// Persistent scalar counts per component of a learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAudit {
    pub model: usize,
    pub optimizer: usize,
    pub prototypes: usize,
    pub fgh: usize,
    pub replay_samples: usize,
}

pub struct Learner {
    config: MethodConfig,
    params: ModelParams,
    optimizer: BaseOptimizer,
    fgh: Option<Fgh>,
    bank: Option<PrototypeBank>,
    replay: Option<ReplayBuffer>,
    rng: Rng,
    steps: u64,
}

impl Learner {
    pub fn new(mut params: ModelParams, config: MethodConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        if config.freezes_extractor() {
            params.freeze_non_fc();
        }
        let method = config.method;
        Ok(Self {
            optimizer: BaseOptimizer::new(config.optimizer)?,
            fgh: method.uses_fgh().then(|| Fgh::new(config.fgh)).transpose()?,
            bank: method
                .uses_prototypes()
                .then(|| PrototypeBank::new(params.num_classes(), params.feature_dim())),
            replay: method.uses_replay().then(|| ReplayBuffer::new(config.replay.capacity)),
            config,
            params,
            rng,
            steps: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bank(&self) -> Option<&PrototypeBank> {
        self.bank.as_ref()
    }

    pub fn fgh(&self) -> Option<&Fgh> {
        self.fgh.as_ref()
    }

    pub fn replay(&self) -> Option<&ReplayBuffer> {
        self.replay.as_ref()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state_audit(&self) -> StateAudit {
        StateAudit {
            model: self.params.num_scalars(),
            optimizer: self.optimizer.num_scalars(),
            prototypes: self.bank.as_ref().map_or(0, PrototypeBank::state_size),
            fgh: self.fgh.as_ref().map_or(0, |f| f.state().num_scalars()),
            replay_samples: self.replay.as_ref().map_or(0, ReplayBuffer::len),
        }
    }

    /// Loss terms and their gradients for a batch, accumulated in the order
    /// base, prototype, replay. Draws the replay batch, so it advances the
    /// learner's generator.
    pub fn batch_gradients(&mut self, x: &Matrix, y: &[usize]) -> Result<BatchGradients> {
        let c = self.params.num_classes();
        if let Some(&bad) = y.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} >= {c} classes")));
        }
        let cache = model::forward(&self.params, x)?;
        let (loss_base, dlogits) = masked_cross_entropy(&cache.logits, y, &unique_labels(y))?;
        let base = model::backward(&self.params, &cache, &dlogits)?;
        let mut total = base.clone();

        let mut loss_proto = 0.0;
        let mut proto = None;
        if let Some(bank) = &self.bank {
            let out = proto_loss(
                bank,
                self.params.fc_weight(),
                self.params.fc_bias(),
                &bank.old_classes(),
                self.config.proto_norm,
            )?;
            let mut g = GradientSet::zeros_like(&self.params);
            g.add_to(FC_WEIGHT, &out.grad_w)?;
            g.add_to(FC_BIAS, &out.grad_b)?;
            total.add_assign(&g)?;
            loss_proto = out.loss;
            proto = Some(g);
        }

        let mut loss_replay = 0.0;
        let mut replay = None;
        if let Some(buffer) = &self.replay {
            let drawn = buffer.retrieve(self.config.replay.retrieve_count, &mut self.rng);
            if !drawn.is_empty() {
                let rows: Vec<&[f64]> = drawn.iter().map(|s| s.features.as_slice()).collect();
                let labels: Vec<usize> = drawn.iter().map(|s| s.label).collect();
                let rx = Matrix::from_rows(&rows)?;
                let rcache = model::forward(&self.params, &rx)?;
                let (l, d) = masked_cross_entropy(&rcache.logits, &labels, &unique_labels(&labels))?;
                let g = model::backward(&self.params, &rcache, &d)?;
                total.add_assign(&g)?;
                loss_replay = l;
                replay = Some(g);
            }
        }

        Ok(BatchGradients {
            loss_base,
            loss_proto,
            loss_replay,
            base,
            proto,
            replay,
            total,
            features: cache.features,
        })
    }

    /// One online step on a batch.
    pub fn observe(&mut self, x: &Matrix, y: &[usize]) -> Result<StepLog> {
        let bg = self.batch_gradients(x, y)?;
        let loss = bg.loss_base + bg.loss_proto + bg.loss_replay;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {}", self.steps)));
        }
        let grads = match &mut self.fgh {
            Some(fgh) => fgh.reweight(bg.total)?,
            None => bg.total,
        };
        let class_norms = metrics::class_gradient_norms(&grads);
        self.optimizer.step(&mut self.params, &grads)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.steps)));
        }
        self.steps += 1;

        if let Some(bank) = &mut self.bank {
            bank.update(&bg.features, y)?;
        }
        if let Some(buffer) = &mut self.replay {
            for (i, &label) in y.iter().enumerate() {
                let sample = Sample {
                    id: i,
                    features: x.row(i).to_vec(),
                    label,
                };
                buffer.reservoir_insert(sample, &mut self.rng);
            }
        }
        let alpha = match (&self.fgh, self.config.log_alpha) {
            (Some(f), true) => f.alpha_summaries(self.steps),
            _ => Vec::new(),
        };
        Ok(StepLog {
            loss_base: bg.loss_base,
            loss_proto: bg.loss_proto,
            loss_replay: bg.loss_replay,
            class_norms,
            alpha,
        })
    }
}

/// Accuracy on each task `0..=upto` using the full, unmasked argmax.
/// Tasks without test samples are `None`.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    task_classes: &[ClassSet],
    upto: usize,
) -> Result<Vec<Option<f64>>> {
    task_classes
        .iter()
        .take(upto + 1)
        .map(|classes| {
            let (x, y) = dataset.test_split_for(classes);
            if y.is_empty() {
                return Ok(None);
            }
            let logits = model::forward(params, &x)?.logits;
            let correct = argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
            Ok(Some(correct as f64 / y.len() as f64))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { batch_index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub method: MethodConfig,
    pub seed: u64,
    pub num_tasks: usize,
    pub num_classes: usize,
    pub task_classes: Vec<ClassSet>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub batch_index: usize,
    pub loss_base: f64,
    pub loss_proto: f64,
    pub loss_replay: f64,
    pub class_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<AlphaSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub after_task: usize,
    pub accuracies: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub status: RunStatus,
    pub average_performance: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub wall_clock_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordRow {
    Header(RunHeader),
    Batch(BatchRow),
    Eval(EvalRow),
    Summary(SummaryRow),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub header: RunHeader,
    pub batches: Vec<BatchRow>,
    pub evals: Vec<EvalRow>,
    pub accuracy: AccuracyMatrix,
    pub summary: SummaryRow,
    /// Not part of the JSON-lines file.
    pub final_params: Option<ModelParams>,
    pub final_bank: Option<PrototypeBank>,
}

impl RunRecord {
    pub fn grad_norm_log(&self) -> GradNormLog {
        GradNormLog {
            steps: self.batches.iter().map(|b| b.class_norms.clone()).collect(),
            task_classes: self.header.task_classes.clone(),
        }
    }

    pub fn is_completed(&self) -> bool {
        self.summary.status == RunStatus::Completed
    }

    pub fn rows(&self) -> Vec<RecordRow> {
        std::iter::once(RecordRow::Header(self.header.clone()))
            .chain(self.batches.iter().cloned().map(RecordRow::Batch))
            .chain(self.evals.iter().cloned().map(RecordRow::Eval))
            .chain(std::iter::once(RecordRow::Summary(self.summary.clone())))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in self.rows() {
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut summary = None;
        let (mut batches, mut evals) = (Vec::new(), Vec::new());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str::<RecordRow>(line)? {
                RecordRow::Header(h) => header = Some(h),
                RecordRow::Batch(b) => batches.push(b),
                RecordRow::Eval(e) => evals.push(e),
                RecordRow::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| Error::Format("run record without header".into()))?;
        let summary = summary.ok_or_else(|| Error::Format("run record without summary".into()))?;
        let mut accuracy = AccuracyMatrix::new(header.num_tasks);
        for e in &evals {
            for (l, a) in e.accuracies.iter().enumerate() {
                accuracy.set(l, e.after_task, *a)?;
            }
        }
        Ok(Self {
            header,
            batches,
            evals,
            accuracy,
            summary,
            final_params: None,
            final_bank: None,
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

/// Runs `method` over `stream` starting from `params`. `rng` drives replay
/// sampling only. Non-finite losses abort the run and are recorded in the
/// summary row rather than returned as errors.
pub fn train_stream(
    stream: &TaskStream,
    dataset: &Dataset,
    params: ModelParams,
    method: &MethodConfig,
    rng: Rng,
    seed: u64,
) -> Result<RunRecord> {
    let started = Instant::now();
    let c = params.num_classes();
    if stream.num_classes > c || dataset.num_classes > c {
        return Err(Error::Contract(format!(
            "model has {c} classes, stream needs {}",
            stream.num_classes.max(dataset.num_classes)
        )));
    }
    let header = RunHeader {
        method: method.clone(),
        seed,
        num_tasks: stream.num_tasks,
        num_classes: c,
        task_classes: stream.task_classes.clone(),
        extra: serde_json::Value::Null,
    };
    let mut learner = Learner::new(params, method.clone(), rng)?;
    let mut accuracy = AccuracyMatrix::new(stream.num_tasks);
    let mut batches = Vec::with_capacity(stream.batches.len());
    let mut evals = Vec::new();
    let mut status = RunStatus::Completed;

    for (i, batch) in stream.batches.iter().enumerate() {
        let x = dataset.train_features(&batch.sample_ids);
        match learner.observe(&x, &batch.labels) {
            Ok(log) => batches.push(BatchRow {
                batch_index: i,
                loss_base: log.loss_base,
                loss_proto: log.loss_proto,
                loss_replay: log.loss_replay,
                class_norms: log.class_norms,
                alpha: log.alpha,
            }),
            Err(Error::NonFinite(reason)) => {
                status = RunStatus::Aborted { batch_index: i, reason };
                break;
            }
            Err(e) => return Err(e),
        }
        let task = batch.task_index;
        let last_of_task = stream.batches.get(i + 1).is_none_or(|n| n.task_index != task);
        let last = i + 1 == stream.batches.len();
        if last_of_task && (method.eval_after_each_task || last) {
            let accs = evaluate(learner.params(), dataset, &stream.task_classes, task)?;
            for (l, a) in accs.iter().enumerate() {
                accuracy.set(l, task, *a)?;
            }
            evals.push(EvalRow {
                after_task: task,
                accuracies: accs,
            });
        }
    }

    let completed = status == RunStatus::Completed;
    let summary = SummaryRow {
        average_performance: completed
            .then(|| metrics::average_performance(&accuracy).ok())
            .flatten(),
        final_accuracy: completed
            .then(|| metrics::final_average_accuracy(&accuracy).ok())
            .flatten(),
        status,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok(RunRecord {
        header,
        batches,
        evals,
        accuracy,
        summary,
        final_bank: learner.bank().cloned(),
        final_params: Some(learner.params.clone()),
    })
}
