//! Datasets and seeded single-pass task streams.
//!
//! Two boundary regimes are supported:
//!
//! - **Clear**: classes are split into contiguous groups by a seeded class
//!   permutation, one group per task.
//! - **Si-Blurry**: every class gets a seeded home task (balanced over
//!   tasks). `M%` of the classes are disjoint and stay in their home task.
//!   Each remaining (blurry) class keeps `(100 - N)%` of its samples in its
//!   home task and scatters the other `N%` over uniformly drawn tasks.
//!
//! In both regimes every training sample is streamed exactly once. Batches
//! are tagged with a task index for evaluation bookkeeping only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassSet;
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    /// Train samples; `train[i].id == i`.
    pub train: Vec<Sample>,
    /// Test samples; `test[i].id == i`.
    pub test: Vec<Sample>,
    /// Original label of each dense class id.
    pub label_map: Vec<i64>,
}

impl Dataset {
    pub fn train_ids_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for s in &self.train {
            out[s.label].push(s.id);
        }
        out
    }

    pub fn train_features(&self, ids: &[usize]) -> Matrix {
        rows_to_matrix(ids.iter().map(|&i| &self.train[i]), self.dim)
    }

    pub fn train_labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.train[i].label).collect()
    }

    /// Test samples whose class is in `classes`, as (features, labels).
    pub fn test_split_for(&self, classes: &ClassSet) -> (Matrix, Vec<usize>) {
        let picked: Vec<&Sample> = self.test.iter().filter(|s| classes.contains(&s.label)).collect();
        let labels = picked.iter().map(|s| s.label).collect();
        (rows_to_matrix(picked.into_iter(), self.dim), labels)
    }

    fn validate(&self) -> Result<()> {
        for (split, samples) in [("train", &self.train), ("test", &self.test)] {
            for (i, s) in samples.iter().enumerate() {
                if s.id != i || s.label >= self.num_classes || s.features.len() != self.dim {
                    return Err(Error::Config(format!("malformed {split} sample {i}")));
                }
            }
        }
        Ok(())
    }
}

fn rows_to_matrix<'a>(samples: impl Iterator<Item = &'a Sample>, dim: usize) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        data.extend_from_slice(&s.features);
        rows += 1;
    }
    Matrix::from_vec(rows, dim, data).expect("sample widths validated at construction")
}

fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64) * train_fraction + 1e-9).floor() as usize
}

/// Assembles a dataset from per-class sample lists (in class order),
/// sending the first `floor(train_fraction * n_j)` of each class to train.
fn split_per_class(
    dim: usize,
    per_class: Vec<Vec<Vec<f64>>>,
    train_fraction: f64,
    label_map: Vec<i64>,
) -> Dataset {
    let num_classes = per_class.len();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, rows) in per_class.into_iter().enumerate() {
        let k = train_count(rows.len(), train_fraction);
        for (i, features) in rows.into_iter().enumerate() {
            let bucket = if i < k { &mut train } else { &mut test };
            bucket.push(Sample {
                id: bucket.len(),
                features,
                label,
            });
        }
    }
    Dataset {
        dim,
        num_classes,
        train,
        test,
        label_map,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Gaussian blobs around random directions of length `class_separation`,
/// 80/20 train/test per class.
pub fn make_synthetic_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes < 2 || dim == 0 {
        return Err(Error::Config("blobs need at least 2 classes and 1 dimension".into()));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v *= class_separation / norm);
        let rows = (0..samples_per_class)
            .map(|_| dir.iter().map(|&m| m + noise_sigma * rng.normal()).collect())
            .collect();
        per_class.push(rows);
    }
    Ok(split_per_class(
        dim,
        per_class,
        0.8,
        (0..num_classes as i64).collect(),
    ))
}

impl BlobSpec {
    pub fn generate(&self) -> Result<Dataset> {
        make_synthetic_blobs(
            self.num_classes,
            self.dim,
            self.samples_per_class,
            self.class_separation,
            self.noise_sigma,
            &mut Rng::new(self.seed),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Leading fraction of each class's rows (file order) used for training.
    pub train_fraction: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

/// Reads `header, f_1..f_d, label` rows. Labels are remapped to dense ids in
/// ascending order of the original values.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(parse_err(1, "need at least one feature column and a label column".into()));
    }
    let dim = headers.len() - 1;
    let mut rows: Vec<(Vec<f64>, i64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 1, record.len())));
        }
        let features = record
            .iter()
            .take(dim)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad feature value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let raw = &record[dim];
        let label = raw
            .trim()
            .parse::<i64>()
            .map_err(|_| parse_err(line, format!("bad label {raw:?}")))?;
        rows.push((features, label));
    }

    let mut dense: BTreeMap<i64, usize> = rows.iter().map(|(_, l)| (*l, 0)).collect();
    for (i, v) in dense.values_mut().enumerate() {
        *v = i;
    }
    let label_map: Vec<i64> = dense.keys().copied().collect();
    if label_map.iter().enumerate().any(|(i, &l)| l != i as i64) {
        log::info!("remapped labels {:?} -> 0..{}", label_map, label_map.len());
    }
    let mut per_class = vec![Vec::new(); label_map.len()];
    for (features, label) in rows {
        per_class[dense[&label]].push(features);
    }
    let ds = split_per_class(dim, per_class, schema.train_fraction, label_map);
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the ingest format, class by class with each class's
/// train rows before its test rows, so that ingest with the matching
/// `train_fraction` reproduces it.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..dataset.dim)
        .map(|k| format!("f{k}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for class in 0..dataset.num_classes {
        for s in dataset.train.iter().chain(&dataset.test).filter(|s| s.label == class) {
            let mut line: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
            line.push(dataset.label_map[class].to_string());
            writeln!(out, "{}", line.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamMode {
    Clear { initial_classes: usize, increment: usize },
    SiBlurry { disjoint_class_pct: f64, blurry_sample_pct: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub mode: StreamMode,
    pub num_tasks: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    100
}

impl StreamSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.batch_size == 0 || self.num_tasks == 0 {
            return Err(Error::Config("batch_size and num_tasks must be positive".into()));
        }
        match self.mode {
            StreamMode::Clear { initial_classes, increment } => {
                let needed = initial_classes + increment * (self.num_tasks - 1);
                if initial_classes == 0 || (self.num_tasks > 1 && increment == 0) {
                    return Err(Error::Config("every task needs at least one class".into()));
                }
                if needed > num_classes {
                    return Err(Error::Config(format!(
                        "class budget exceeded: {needed} classes needed, {num_classes} available"
                    )));
                }
            }
            StreamMode::SiBlurry { disjoint_class_pct, blurry_sample_pct } => {
                for v in [disjoint_class_pct, blurry_sample_pct] {
                    if !(0.0..=100.0).contains(&v) {
                        return Err(Error::Config(format!("percentage {v} outside [0, 100]")));
                    }
                }
                if num_classes < self.num_tasks {
                    return Err(Error::Config(format!(
                        "{num_classes} classes cannot cover {} tasks",
                        self.num_tasks
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub task_index: usize,
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub num_tasks: usize,
    pub num_classes: usize,
    pub batches: Vec<Batch>,
    /// Classes owned by each task: the task's class group in clear mode,
    /// the classes whose home task it is in Si-Blurry mode.
    pub task_classes: Vec<ClassSet>,
    /// `presence[k][j]`: number of class-`j` samples streamed in task `k`.
    pub presence: Vec<Vec<usize>>,
    /// Classes confined to their home task (every streamed class in clear mode).
    pub disjoint_classes: ClassSet,
    /// Per class, samples streamed through the scatter step.
    pub scattered: Vec<usize>,
}

/// Row of the schedule export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub batch_index: usize,
    pub task_index: usize,
    pub sample_ids: Vec<usize>,
}

impl TaskStream {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    /// Home task of each class, if it is streamed at all.
    pub fn home_task(&self) -> Vec<Option<usize>> {
        let mut home = vec![None; self.num_classes];
        for (k, classes) in self.task_classes.iter().enumerate() {
            for &j in classes {
                home[j] = Some(k);
            }
        }
        home
    }

    pub fn streamed_ids(&self) -> Vec<usize> {
        self.batches.iter().flat_map(|b| b.sample_ids.iter().copied()).collect()
    }

    pub fn schedule(&self) -> Vec<ScheduleRow> {
        self.batches
            .iter()
            .enumerate()
            .map(|(i, b)| ScheduleRow {
                batch_index: i,
                task_index: b.task_index,
                sample_ids: b.sample_ids.clone(),
            })
            .collect()
    }

    /// Tab-separated `task` x `class` sample counts.
    pub fn presence_tsv(&self) -> String {
        let mut out = String::from("task");
        for j in 0..self.num_classes {
            out.push_str(&format!("\tc{j}"));
        }
        out.push('\n');
        for (k, row) in self.presence.iter().enumerate() {
            out.push_str(&k.to_string());
            for n in row {
                out.push_str(&format!("\t{n}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn make_stream(dataset: &Dataset, spec: &StreamSpec, rng: &mut Rng) -> Result<TaskStream> {
    match spec.mode {
        StreamMode::Clear { .. } => make_clear(dataset, spec, rng),
        StreamMode::SiBlurry { .. } => make_si_blurry(dataset, spec, rng),
    }
}

fn batch_tasks(
    dataset: &Dataset,
    mut per_task: Vec<Vec<usize>>,
    batch_size: usize,
    rng: &mut Rng,
) -> (Vec<Batch>, Vec<Vec<usize>>) {
    let mut batches = Vec::new();
    let mut presence = vec![vec![0; dataset.num_classes]; per_task.len()];
    for (k, ids) in per_task.iter_mut().enumerate() {
        rng.shuffle(ids);
        for chunk in ids.chunks(batch_size) {
            let labels = dataset.train_labels(chunk);
            for &y in &labels {
                presence[k][y] += 1;
            }
            batches.push(Batch {
                task_index: k,
                sample_ids: chunk.to_vec(),
                labels,
            });
        }
    }
    (batches, presence)
}

pub fn make_clear(dataset: &Dataset, spec: &StreamSpec, rng: &mut Rng) -> Result<TaskStream> {
    let StreamMode::Clear { initial_classes, increment } = spec.mode else {
        return Err(Error::Config("make_clear needs a clear stream spec".into()));
    };
    spec.validate(dataset.num_classes)?;
    let order = rng.permutation(dataset.num_classes);
    let by_class = dataset.train_ids_by_class();
    let mut task_classes = Vec::with_capacity(spec.num_tasks);
    let mut per_task = Vec::with_capacity(spec.num_tasks);
    let mut start = 0;
    for k in 0..spec.num_tasks {
        let n = if k == 0 { initial_classes } else { increment };
        let classes: ClassSet = order[start..start + n].iter().copied().collect();
        start += n;
        per_task.push(classes.iter().flat_map(|&j| by_class[j].iter().copied()).collect());
        task_classes.push(classes);
    }
    let disjoint_classes = task_classes.iter().flatten().copied().collect();
    let (batches, presence) = batch_tasks(dataset, per_task, spec.batch_size, rng);
    Ok(TaskStream {
        num_tasks: spec.num_tasks,
        num_classes: dataset.num_classes,
        batches,
        task_classes,
        presence,
        disjoint_classes,
        scattered: vec![0; dataset.num_classes],
    })
}

pub fn make_si_blurry(dataset: &Dataset, spec: &StreamSpec, rng: &mut Rng) -> Result<TaskStream> {
    let StreamMode::SiBlurry { disjoint_class_pct, blurry_sample_pct } = spec.mode else {
        return Err(Error::Config("make_si_blurry needs a Si-Blurry stream spec".into()));
    };
    spec.validate(dataset.num_classes)?;
    let (c, t) = (dataset.num_classes, spec.num_tasks);

    let order = rng.permutation(c);
    let mut home = vec![0; c];
    for (pos, &j) in order.iter().enumerate() {
        home[j] = pos * t / c;
    }
    let n_disjoint = ((c as f64) * disjoint_class_pct / 100.0).round() as usize;
    let disjoint_classes: ClassSet = rng.permutation(c).into_iter().take(n_disjoint).collect();

    let mut per_task = vec![Vec::new(); t];
    let mut scattered = vec![0; c];
    for (j, ids) in dataset.train_ids_by_class().into_iter().enumerate() {
        let mut ids = ids;
        if disjoint_classes.contains(&j) {
            per_task[home[j]].extend(ids);
            continue;
        }
        rng.shuffle(&mut ids);
        let n_scatter = ((ids.len() as f64) * blurry_sample_pct / 100.0).round() as usize;
        scattered[j] = n_scatter;
        for (i, id) in ids.into_iter().enumerate() {
            let task = if i < n_scatter { rng.below(t) } else { home[j] };
            per_task[task].push(id);
        }
    }
    let mut task_classes = vec![ClassSet::new(); t];
    for (j, &k) in home.iter().enumerate() {
        task_classes[k].insert(j);
    }
    let (batches, presence) = batch_tasks(dataset, per_task, spec.batch_size, rng);
    Ok(TaskStream {
        num_tasks: t,
        num_classes: c,
        batches,
        task_classes,
        presence,
        disjoint_classes,
        scattered,
    })
}
