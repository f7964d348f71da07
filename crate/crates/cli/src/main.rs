use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fghcl::experiment::{
    cell_stream, export_tables, gamma_table, run_cell, run_holdout, run_sweep, BestHp, Cell, ExperimentConfig,
    SweepSummary,
};
use fghcl::metrics::{curve_tsv, task_gradient_curve, task_gradient_norms, task_norms_tsv};
use fghcl::{checkpoint, RunRecord};

/// Online continual learning experiments: single runs, seeded sweeps,
/// hyperparameter selection and table/plot export.
#[derive(Parser)]
#[command(name = "fghcl", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one (method, lr, gamma, seed) cell and write its run record.
    Run(RunArgs),
    /// Run every cell of the config and write the summary and tables.
    Sweep(SweepArgs),
    /// Sweep the holdout dataset and pick the best lr and gamma per method.
    BestHp(SweepArgs),
    /// Render AP tables from saved sweep summaries.
    ExportTables(ExportTablesArgs),
    /// Write per-task gradient-norm TSVs from a run record.
    ExportGradplots(GradplotArgs),
    /// Dump the batch schedule and class-presence table of a stream.
    StreamAudit(AuditArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Method label from the config; may be omitted when there is only one.
    #[arg(long)]
    method: Option<String>,
    /// Defaults to the first entry of `lr_grid`.
    #[arg(long)]
    lr: Option<f64>,
    /// Defaults to the first entry of `gamma_grid` for FGH methods.
    #[arg(long)]
    gamma: Option<f64>,
    /// Defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Worker threads; overrides `jobs` in the config.
    #[arg(long)]
    jobs: Option<usize>,
    /// Master seed for training-time randomness; overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportTablesArgs {
    /// `summary.json` files written by `sweep`.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// `best_hp.json` written by `best-hp`.
    #[arg(long)]
    best: Option<PathBuf>,
    /// Write the tables here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradplotArgs {
    /// A run record (`.jsonl`).
    record: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Trailing smoothing window for the curves.
    #[arg(long, default_value_t = 1)]
    window: usize,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(args: &ConfigArgs) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let mut cfg = ExperimentConfig::from_path(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.output_dir = Some(out.clone());
    }
    let base = args.config.parent().map(Path::to_path_buf);
    Ok((cfg, base))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (cfg, base) = load_config(&args.cfg)?;
    let method_index = match &args.method {
        Some(label) => cfg
            .methods
            .iter()
            .position(|m| &m.label() == label)
            .with_context(|| format!("no method labelled {label:?} in the config"))?,
        None if cfg.methods.len() == 1 => 0,
        None => bail!("config has several methods; pick one with --method"),
    };
    let spec = &cfg.methods[method_index];
    let lr = args.lr.unwrap_or(cfg.lr_grid[0]);
    let gamma = spec
        .method
        .uses_fgh()
        .then(|| args.gamma.or(cfg.gamma_grid.first().copied()).unwrap_or(spec.fgh.gamma));
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let label = spec.label();
    let cells = cfg.cells();
    let index = cells
        .iter()
        .find(|c| c.label == label && c.lr == lr && c.gamma == gamma && c.seed == seed)
        .map_or(cells.len(), |c| c.index);
    let cell = Cell {
        index,
        method_index,
        label,
        lr,
        gamma,
        seed,
    };
    let dataset = cfg.dataset.load(base.as_deref())?;
    let record = run_cell(&cfg, &dataset, &cell)?;
    println!(
        "{} lr={lr:e} gamma={} seed={seed}: AP={} A_T={} ({:?})",
        cell.label,
        gamma.map_or("-".into(), |g| format!("{g:e}")),
        fmt_pct(record.summary.average_performance),
        fmt_pct(record.summary.final_accuracy),
        record.summary.status
    );
    if let Some(out) = &cfg.output_dir {
        std::fs::create_dir_all(out)?;
        let path = out.join(cell.file_name());
        record.write_jsonl(&path)?;
        if let Some(params) = &record.final_params {
            let ckpt = path.with_extension("ckpt");
            checkpoint::save(&ckpt, params, record.final_bank.as_ref())?;
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn sweep_config(args: &SweepArgs) -> Result<(ExperimentConfig, Option<PathBuf>)> {
    let (mut cfg, base) = load_config(&args.cfg)?;
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    Ok((cfg, base))
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (cfg, base) = sweep_config(&args)?;
    let summary = run_sweep(&cfg, base.as_deref())?;
    report(&cfg, &summary, &[])
}

fn cmd_best_hp(args: SweepArgs) -> Result<()> {
    let (cfg, base) = sweep_config(&args)?;
    let summary = run_holdout(&cfg, base.as_deref())?;
    for b in &summary.best {
        println!(
            "{}: lr={:e} gamma={} AP={:.2}",
            b.label,
            b.lr,
            b.gamma.map_or("-".into(), |g| format!("{g:e}")),
            100.0 * b.ap
        );
    }
    if let Some(out) = &cfg.output_dir {
        write(&out.join("best_hp.json"), &serde_json::to_string_pretty(&summary.best)?)?;
    }
    report(&cfg, &summary, &summary.best)
}

fn report(cfg: &ExperimentConfig, summary: &SweepSummary, best: &[BestHp]) -> Result<()> {
    let failed = summary.cells.iter().filter(|c| c.failure.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", summary.cells.len());
    }
    let tables = export_tables(std::slice::from_ref(summary), best);
    let gammas = summary.rows.iter().any(|r| r.gamma.is_some()).then(|| gamma_table(summary));
    print!("{tables}");
    if let Some(g) = &gammas {
        print!("{g}");
    }
    if let Some(out) = &cfg.output_dir {
        let dir = out.join(&summary.dataset);
        write(&dir.join("tables.txt"), &tables)?;
        if let Some(g) = &gammas {
            write(&dir.join("gamma.txt"), g)?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_export_tables(args: ExportTablesArgs) -> Result<()> {
    let summaries = args
        .summaries
        .iter()
        .map(|p| read_json::<SweepSummary>(p))
        .collect::<Result<Vec<_>>>()?;
    let best: Vec<BestHp> = match &args.best {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let text = export_tables(&summaries, &best);
    match &args.out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_export_gradplots(args: GradplotArgs) -> Result<()> {
    let record = RunRecord::read_jsonl(&args.record)
        .with_context(|| format!("reading run record {}", args.record.display()))?;
    let log = record.grad_norm_log();
    write(&args.out.join("task_norms.tsv"), &task_norms_tsv(&task_gradient_norms(&log)?))?;
    for k in 0..log.task_classes.len() {
        let curve = task_gradient_curve(&log, k, args.window)?;
        write(&args.out.join(format!("curve_task{k}.tsv")), &curve_tsv(&curve))?;
    }
    println!("wrote {} task curves to {}", log.task_classes.len(), args.out.display());
    Ok(())
}

fn cmd_stream_audit(args: AuditArgs) -> Result<()> {
    let (cfg, base) = load_config(&args.cfg)?;
    let dataset = cfg.dataset.load(base.as_deref())?;
    let stream = cell_stream(&dataset, &cfg.stream, args.seed)?;
    let mut schedule = String::from("batch\ttask\tsize\tsample_ids\n");
    for row in stream.schedule() {
        let ids: Vec<String> = row.sample_ids.iter().map(usize::to_string).collect();
        schedule.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            row.batch_index,
            row.task_index,
            row.sample_ids.len(),
            ids.join(",")
        ));
    }
    let presence = stream.presence_tsv();
    println!(
        "{} batches over {} tasks, {} samples, {} disjoint classes",
        stream.num_batches(),
        stream.num_tasks,
        stream.streamed_ids().len(),
        stream.disjoint_classes.len()
    );
    for (k, classes) in stream.task_classes.iter().enumerate() {
        let present = stream.presence[k].iter().filter(|&&n| n > 0).count();
        let samples: usize = stream.presence[k].iter().sum();
        println!("task {k}: {} home classes, {present} classes present, {samples} samples", classes.len());
    }
    match &cfg.output_dir {
        Some(out) => {
            write(&out.join("schedule.tsv"), &schedule)?;
            write(&out.join("presence.tsv"), &presence)?;
        }
        None => print!("{presence}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::BestHp(a) => cmd_best_hp(a),
        Command::ExportTables(a) => cmd_export_tables(a),
        Command::ExportGradplots(a) => cmd_export_gradplots(a),
        Command::StreamAudit(a) => cmd_stream_audit(a),
    }
}
