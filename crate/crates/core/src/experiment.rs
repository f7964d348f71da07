//! Seeded sweeps over methods × learning rates × γ × seeds, hyperparameter
//! selection and table export.
//!
//! Randomness per cell: the stream comes from `Rng::new(seed).split(1)` and
//! the initial parameters from `Rng::new(seed).split(2)`, so every method and
//! hyperparameter sees the same stream and initialisation for a given seed.
//! Training-time randomness (replay sampling) comes from
//! `Rng::new(master_seed).split(cell_index)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgh::{FghConfig, OptimizerKind};
use crate::metrics::mean_std;
use crate::model::{init_params, Extractor, ModelConfig, ModelParams};
use crate::numkit::Rng;
use crate::prototypes::ProtoNorm;
use crate::stream::{ingest_csv, make_stream, BlobSpec, CsvSchema, Dataset, StreamSpec, TaskStream};
use crate::trainer::{train_stream, Method, MethodConfig, ReplayConfig, RunRecord};

const STREAM_CHILD: u64 = 1;
const INIT_CHILD: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Csv {
        path: PathBuf,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
}

fn default_train_fraction() -> f64 {
    0.8
}

impl DatasetSpec {
    /// Relative CSV paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs(spec) => spec.generate(),
            DatasetSpec::Csv { path, train_fraction } => {
                let full = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                ingest_csv(&full, &CsvSchema { train_fraction: *train_fraction })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Blobs(b) => format!("blobs-c{}-d{}", b.num_classes, b.dim),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Defaults to the input dimension.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default = "default_extractor")]
    pub extractor: Extractor,
    #[serde(default)]
    pub extractor_trainable: bool,
}

fn default_extractor() -> Extractor {
    Extractor::FrozenRandomProjection
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            feature_dim: None,
            extractor: Extractor::FrozenRandomProjection,
            extractor_trainable: false,
        }
    }
}

impl ModelSpec {
    pub fn config_for(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            input_dim: dataset.dim,
            feature_dim: self.feature_dim.unwrap_or(dataset.dim),
            num_classes: dataset.num_classes,
            extractor: self.extractor,
            extractor_trainable: self.extractor_trainable,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Adam,
    Sgd,
}

/// One method entry of a sweep; learning rate and γ come from the grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    /// Row label in summaries and tables; defaults to the method name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub optimizer: OptimizerName,
    #[serde(default)]
    pub linear_probe: bool,
    #[serde(default)]
    pub fgh: FghConfig,
    #[serde(default)]
    pub replay: ReplayConfig,
    #[serde(default)]
    pub proto_norm: ProtoNorm,
    #[serde(default)]
    pub log_alpha: bool,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            label: None,
            optimizer: OptimizerName::Adam,
            linear_probe: false,
            fgh: FghConfig::default(),
            replay: ReplayConfig::default(),
            proto_norm: ProtoNorm::default(),
            log_alpha: false,
        }
    }

    pub fn label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None if self.linear_probe && !self.method.is_linear_probe() => {
                format!("{}+lp", self.method.name())
            }
            None => self.method.name().to_string(),
        }
    }

    pub fn to_config(&self, lr: f64, gamma: Option<f64>) -> MethodConfig {
        let optimizer = match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(lr),
            OptimizerName::Sgd => OptimizerKind::Sgd { lr },
        };
        let mut fgh = self.fgh;
        if let Some(g) = gamma {
            fgh.gamma = g;
        }
        MethodConfig {
            method: self.method,
            optimizer,
            fgh,
            replay: self.replay,
            linear_probe: self.linear_probe,
            eval_after_each_task: true,
            proto_norm: self.proto_norm,
            log_alpha: self.log_alpha,
        }
    }
}

fn default_lr_grid() -> Vec<f64> {
    vec![5e-5, 5e-3]
}

fn default_gamma_grid() -> Vec<f64> {
    vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Dataset used by best-hyperparameter selection.
    #[serde(default)]
    pub holdout: Option<DatasetSpec>,
    #[serde(default)]
    pub model: ModelSpec,
    pub stream: StreamSpec,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    /// Where per-cell run records and summaries go; nothing is written when
    /// unset.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 picks the number of cores.
    #[serde(default)]
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.lr_grid.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("methods, lr_grid and seeds must be nonempty".into()));
        }
        if self.methods.iter().any(|m| m.method.uses_fgh()) && self.gamma_grid.is_empty() {
            return Err(Error::Config("gamma_grid must be nonempty when an FGH method is swept".into()));
        }
        if let Some(lr) = self.lr_grid.iter().find(|&&lr| !(lr > 0.0)) {
            return Err(Error::Config(format!("learning rates must be > 0, got {lr}")));
        }
        if let Some(g) = self.gamma_grid.iter().find(|&&g| !(g >= 0.0 && g.is_finite())) {
            return Err(Error::Config(format!("gamma values must be >= 0, got {g}")));
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("method labels must be distinct".into()));
        }
        Ok(())
    }

    /// Every (method, lr, γ, seed) cell in a fixed order. Non-FGH methods
    /// get a single cell per lr with no γ.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (mi, m) in self.methods.iter().enumerate() {
            let gammas: Vec<Option<f64>> = if m.method.uses_fgh() {
                self.gamma_grid.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for &lr in &self.lr_grid {
                for &gamma in &gammas {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            index: out.len(),
                            method_index: mi,
                            label: m.label(),
                            lr,
                            gamma,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub method_index: usize,
    pub label: String,
    pub lr: f64,
    pub gamma: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn file_name(&self) -> String {
        let gamma = self.gamma.map_or_else(|| "none".to_string(), |g| format!("{g:e}"));
        format!("{}_lr{:e}_g{}_s{}.jsonl", self.label, self.lr, gamma, self.seed)
    }
}

pub fn cell_stream(dataset: &Dataset, spec: &StreamSpec, seed: u64) -> Result<TaskStream> {
    let spec = StreamSpec { seed, ..spec.clone() };
    make_stream(dataset, &spec, &mut Rng::new(seed).split(STREAM_CHILD))
}

pub fn cell_init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_params(config, &mut Rng::new(seed).split(INIT_CHILD))
}

pub fn run_cell(config: &ExperimentConfig, dataset: &Dataset, cell: &Cell) -> Result<RunRecord> {
    let spec = config
        .methods
        .get(cell.method_index)
        .ok_or_else(|| Error::Config(format!("cell {} has no method", cell.index)))?;
    let stream = cell_stream(dataset, &config.stream, cell.seed)?;
    let params = cell_init(&config.model.config_for(dataset), cell.seed)?;
    let method = spec.to_config(cell.lr, cell.gamma);
    let rng = Rng::new(config.master_seed).split(cell.index as u64);
    let mut record = train_stream(&stream, dataset, params, &method, rng, cell.seed)?;
    record.header.extra = serde_json::json!({
        "cell": cell.index,
        "label": cell.label,
        "lr": cell.lr,
        "gamma": cell.gamma,
        "dataset": config.dataset.name(),
    });
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub average_performance: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// Set when the cell aborted or errored.
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| {
            let (mean, std) = mean_std(values);
            Self { mean, std }
        })
    }

    /// Percentages with two decimals, `79.22±3.02`.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub method: Method,
    pub linear_probe: bool,
    pub lr: f64,
    pub gamma: Option<f64>,
    pub seeds: Vec<u64>,
    /// Per completed seed, in seed order.
    pub ap_values: Vec<f64>,
    pub final_values: Vec<f64>,
    pub ap: Option<MeanStd>,
    pub final_accuracy: Option<MeanStd>,
    pub failed_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestHp {
    pub label: String,
    pub lr: f64,
    pub gamma: Option<f64>,
    pub ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub dataset: String,
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellOutcome>,
    #[serde(default)]
    pub best: Vec<BestHp>,
}

impl SweepSummary {
    pub fn row(&self, label: &str, lr: f64, gamma: Option<f64>) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.lr == lr && r.gamma == gamma)
    }

    pub fn lrs(&self) -> Vec<f64> {
        let mut lrs: Vec<f64> = self.rows.iter().map(|r| r.lr).collect();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        lrs
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }
}

/// Runs every cell on a bounded pool, writes one record per cell when an
/// output directory is configured, and reduces the outcomes in cell order.
pub fn run_sweep(config: &ExperimentConfig, base: Option<&Path>) -> Result<SweepSummary> {
    config.validate()?;
    let dataset = config.dataset.load(base)?;
    sweep_on(config, &dataset, &config.dataset.name())
}

/// Same as [`run_sweep`] on the holdout dataset, followed by selection.
pub fn run_holdout(config: &ExperimentConfig, base: Option<&Path>) -> Result<SweepSummary> {
    config.validate()?;
    let spec = config
        .holdout
        .as_ref()
        .ok_or_else(|| Error::Config("no holdout dataset configured".into()))?;
    let dataset = spec.load(base)?;
    let mut summary = sweep_on(config, &dataset, &format!("{}-holdout", spec.name()))?;
    summary.best = select_best_hp(&summary)?;
    Ok(summary)
}

pub fn sweep_on(config: &ExperimentConfig, dataset: &Dataset, name: &str) -> Result<SweepSummary> {
    let out_dir = config.output_dir.as_ref().map(|d| d.join(name));
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir.join("runs"))?;
    }
    let cells = config.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| execute_cell(config, dataset, cell, out_dir.as_deref()))
            .collect()
    });
    let summary = reduce(name, config, outcomes);
    if let Some(dir) = &out_dir {
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

fn execute_cell(config: &ExperimentConfig, dataset: &Dataset, cell: &Cell, out: Option<&Path>) -> CellOutcome {
    let result = run_cell(config, dataset, cell).and_then(|rec| {
        if let Some(dir) = out {
            rec.write_jsonl(&dir.join("runs").join(cell.file_name()))?;
        }
        Ok(rec)
    });
    match result {
        Ok(rec) => {
            let failure = (!rec.is_completed()).then(|| format!("{:?}", rec.summary.status));
            if let Some(f) = &failure {
                log::warn!("cell {} ({}) failed: {f}", cell.index, cell.file_name());
            }
            CellOutcome {
                cell: cell.clone(),
                average_performance: rec.summary.average_performance,
                final_accuracy: rec.summary.final_accuracy,
                failure,
            }
        }
        Err(e) => {
            log::warn!("cell {} ({}) errored: {e}", cell.index, cell.file_name());
            CellOutcome {
                cell: cell.clone(),
                average_performance: None,
                final_accuracy: None,
                failure: Some(e.to_string()),
            }
        }
    }
}

fn reduce(name: &str, config: &ExperimentConfig, outcomes: Vec<CellOutcome>) -> SweepSummary {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for o in &outcomes {
        let c = &o.cell;
        let pos = rows
            .iter()
            .position(|r| r.label == c.label && r.lr == c.lr && r.gamma == c.gamma);
        let row = match pos {
            Some(p) => &mut rows[p],
            None => {
                let spec = &config.methods[c.method_index];
                rows.push(SummaryRow {
                    label: c.label.clone(),
                    method: spec.method,
                    linear_probe: spec.linear_probe || spec.method.is_linear_probe(),
                    lr: c.lr,
                    gamma: c.gamma,
                    seeds: Vec::new(),
                    ap_values: Vec::new(),
                    final_values: Vec::new(),
                    ap: None,
                    final_accuracy: None,
                    failed_seeds: Vec::new(),
                });
                rows.last_mut().expect("just pushed")
            }
        };
        match (o.failure.is_none(), o.average_performance, o.final_accuracy) {
            (true, Some(ap), Some(fa)) => {
                row.seeds.push(c.seed);
                row.ap_values.push(ap);
                row.final_values.push(fa);
            }
            _ => row.failed_seeds.push(c.seed),
        }
    }
    for r in &mut rows {
        r.ap = MeanStd::of(&r.ap_values);
        r.final_accuracy = MeanStd::of(&r.final_values);
    }
    SweepSummary {
        dataset: name.to_string(),
        rows,
        cells: outcomes,
        best: Vec::new(),
    }
}

/// Per label: the row with the highest mean AP; ties go to the smaller lr,
/// then the smaller γ.
pub fn select_best_hp(summary: &SweepSummary) -> Result<Vec<BestHp>> {
    let mut best: BTreeMap<&str, (&SummaryRow, f64)> = BTreeMap::new();
    for row in &summary.rows {
        let Some(ap) = row.ap else { continue };
        let better = match best.get(row.label.as_str()) {
            None => true,
            Some((cur, cur_ap)) => {
                ap.mean > *cur_ap
                    || (ap.mean == *cur_ap
                        && (row.lr, row.gamma.unwrap_or(0.0)) < (cur.lr, cur.gamma.unwrap_or(0.0)))
            }
        };
        if better {
            best.insert(&row.label, (row, ap.mean));
        }
    }
    if best.is_empty() {
        return Err(Error::Config("no completed cells to select from".into()));
    }
    let order = summary.labels();
    Ok(order
        .iter()
        .filter_map(|l| best.get(l.as_str()))
        .map(|(row, ap)| BestHp {
            label: row.label.clone(),
            lr: row.lr,
            gamma: row.gamma,
            ap: *ap,
        })
        .collect())
}

fn best_gamma_row<'a>(summary: &'a SweepSummary, label: &str, lr: f64, prefer: Option<f64>) -> Option<&'a SummaryRow> {
    let candidates: Vec<&SummaryRow> = summary.rows.iter().filter(|r| r.label == label && r.lr == lr).collect();
    if let Some(g) = prefer {
        if let Some(r) = candidates.iter().find(|r| r.gamma == Some(g)) {
            return Some(r);
        }
    }
    candidates
        .into_iter()
        .filter(|r| r.ap.is_some())
        .fold(None, |acc: Option<&SummaryRow>, r| match acc {
            Some(a) if a.ap.map(|x| x.mean) >= r.ap.map(|x| x.mean) => Some(a),
            _ => Some(r),
        })
}

/// AP table: one block per summary, one row per label, columns low-LR,
/// high-LR and Best-HP. FGH rows use the selected γ when `best` names one and
/// otherwise the best γ at that learning rate. Best-HP reads the cell picked
/// on the holdout (`best`), or `-` when there is none.
pub fn export_tables(summaries: &[SweepSummary], best: &[BestHp]) -> String {
    let mut out = String::new();
    for s in summaries {
        let lrs = s.lrs();
        let (low, high) = (lrs.first().copied(), lrs.last().copied());
        let _ = writeln!(out, "# {}", s.dataset);
        let fmt_lr = |lr: Option<f64>| lr.map_or_else(|| "-".into(), |v| format!("{v:e}"));
        let _ = writeln!(
            out,
            "method\tlow-LR ({})\thigh-LR ({})\tBest-HP",
            fmt_lr(low),
            fmt_lr(high)
        );
        for label in s.labels() {
            let chosen = best.iter().find(|b| b.label == label);
            let cell = |lr: Option<f64>, gamma: Option<f64>| -> String {
                lr.and_then(|lr| best_gamma_row(s, &label, lr, gamma))
                    .and_then(|r| r.ap)
                    .map_or_else(|| "-".into(), |m| m.percent())
            };
            let g = chosen.and_then(|b| b.gamma);
            let best_cell = chosen.map_or_else(|| "-".to_string(), |b| cell(Some(b.lr), b.gamma));
            let _ = writeln!(out, "{label}\t{}\t{}\t{best_cell}", cell(low, g), cell(high, g));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableBlock {
    pub dataset: String,
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<Option<(f64, f64)>>)>,
}

/// Parses text produced by [`export_tables`] or [`gamma_table`]; values come
/// back as fractions.
pub fn parse_tables(text: &str) -> Result<Vec<TableBlock>> {
    let mut blocks: Vec<TableBlock> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix("# ") {
            blocks.push(TableBlock {
                dataset: name.to_string(),
                header: Vec::new(),
                rows: Vec::new(),
            });
            continue;
        }
        let block = blocks
            .last_mut()
            .ok_or_else(|| Error::Format(format!("line {}: table row before block header", i + 1)))?;
        let fields: Vec<&str> = line.split('\t').collect();
        if block.header.is_empty() {
            block.header = fields.iter().map(|f| f.to_string()).collect();
            continue;
        }
        let values = fields[1..]
            .iter()
            .map(|f| parse_cell(f).map_err(|m| Error::Format(format!("line {}: {m}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        block.rows.push((fields[0].to_string(), values));
    }
    Ok(blocks)
}

fn parse_cell(field: &str) -> std::result::Result<Option<(f64, f64)>, String> {
    if field == "-" {
        return Ok(None);
    }
    let (m, s) = field
        .split_once('±')
        .ok_or_else(|| format!("expected mean±std, got {field:?}"))?;
    let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Some((parse(m)? / 100.0, parse(s)? / 100.0)))
}

/// Final average accuracy against γ: one row per (FGH label, lr), one column
/// per γ, plus a `no-fgh` column holding the same method without FGH at that
/// lr when the sweep has it.
pub fn gamma_table(summary: &SweepSummary) -> String {
    let mut gammas: Vec<f64> = summary.rows.iter().filter_map(|r| r.gamma).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let mut out = format!("# {} final accuracy vs gamma\n", summary.dataset);
    out.push_str("method@lr");
    for g in &gammas {
        let _ = write!(out, "\t{g:e}");
    }
    out.push_str("\tno-fgh\n");
    for label in summary.labels() {
        for lr in summary.lrs() {
            let Some(any) = summary.rows.iter().find(|r| r.label == label && r.lr == lr) else {
                continue;
            };
            if any.gamma.is_none() {
                continue;
            }
            let _ = write!(out, "{label}@{lr:e}");
            for &g in &gammas {
                let v = summary.row(&label, lr, Some(g)).and_then(|r| r.final_accuracy);
                let _ = write!(out, "\t{}", v.map_or_else(|| "-".into(), |m| m.percent()));
            }
            let base = baseline_row(summary, any).and_then(|r| r.final_accuracy);
            let _ = writeln!(out, "\t{}", base.map_or_else(|| "-".into(), |m| m.percent()));
        }
    }
    out
}

/// The non-FGH counterpart of an FGH row at the same lr.
pub fn baseline_row<'a>(summary: &'a SweepSummary, fgh_row: &SummaryRow) -> Option<&'a SummaryRow> {
    let base = match fgh_row.method {
        Method::ProtoFgh => Method::Proto,
        Method::Fgh => Method::FineTune,
        _ => return None,
    };
    summary.rows.iter().find(|r| {
        r.gamma.is_none()
            && r.lr == fgh_row.lr
            && r.linear_probe == fgh_row.linear_probe
            && (r.method == base || (base == Method::FineTune && r.method == Method::LinearProbe))
    })
}
