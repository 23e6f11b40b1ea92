//! The `dos` command line.
//!
//! ```text
//! dos gen-data --profile desk --seed 7 --out data/
//! dos train --data data/ --seed 7 --out runs/dos
//! dos export-sids --checkpoint runs/dos/checkpoint.bin --data data/ --out runs/dos/sids.tsv
//! dos baseline rq-kmeans --data data/ --seed 7 --out runs/rqk/sids.tsv
//! dos eval --checkpoint runs/dos/checkpoint.bin --data data/ --out runs/dos/metrics.json
//! dos probe --sids dos=runs/dos/sids.tsv --sids rq-kmeans=runs/rqk/sids.tsv --data data/ --seed 7 --out probe.json
//! dos report runs/dos/metrics.json probe.json
//! ```
//!
//! Exit status: 0 on success, 1 on a usage error, 2 when the run fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::baselines::{rq_kmeans_fit, rq_vae_lite_train, RqVaeConfig};
use crate::dfi::export_item_sids;
use crate::embeddings::{gen_synthetic, SyntheticConfig};
use crate::eval::MetricReport;
use crate::pipeline::{self, align_sids, read_json, sid_report, write_json, Dataset, PipelineError};
use crate::probe::{run_probe, ProbeConfig, ProbeReport};
use crate::sid::{read_sids, write_sids, SemanticId};
use crate::training::{self, load_checkpoint, save_checkpoint, split_811, write_metrics_csv, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "dos", version, about = "Learn and evaluate item Semantic IDs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted hierarchy.
    GenData(GenDataArgs),
    /// Train the dual-tower model.
    Train(TrainArgs),
    /// Export item SIDs from a checkpoint.
    ExportSids(ExportArgs),
    /// Fit a baseline quantizer and export its SIDs.
    Baseline(BaselineArgs),
    /// Write a metric report for a checkpoint or a SID file.
    Eval(EvalArgs),
    /// Train and evaluate the next-SID probe on one or more SID files.
    Probe(ProbeArgs),
    /// Merge metric and probe reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// `desk` or `tiny`.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Corpus config JSON; overrides the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where the catalog and interactions come from.
#[derive(Debug, Args)]
struct DataArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    hierarchy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON with any subset of the training config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `desk`, `tiny` or `production`; the base the config file is applied to.
    #[arg(long, default_value = "desk")]
    profile: String,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Replace the transformer encoders with MLPs.
    #[arg(long)]
    mlp_encoder: bool,
    /// Give each tower its own codebooks.
    #[arg(long)]
    unshared_codebook: bool,
    /// Reconstruct through a learned decoder instead of summing codes.
    #[arg(long)]
    with_decoder: bool,
    /// Apply the mutual-information loss to the first layer only.
    #[arg(long)]
    mutual_first_layer_only: bool,
    /// Output directory for checkpoint, metrics CSV and resolved config.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(subcommand)]
    kind: BaselineKind,
}

#[derive(Debug, Subcommand)]
enum BaselineKind {
    /// Residual k-means.
    RqKmeans(QuantizerArgs),
    /// Residual VQ autoencoder trained on reconstruction only.
    RqVae(QuantizerArgs),
}

#[derive(Debug, Args)]
struct QuantizerArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 64)]
    codebook_size: usize,
    /// Lloyd iterations (rq-kmeans) or epochs (rq-vae).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "sids", required_unless_present = "sids")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sids: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Scheme name in the report; defaults to `dos` or the SID file stem.
    #[arg(long)]
    scheme: Option<String>,
    /// Codebook size for SID files (checkpoints carry their own).
    #[arg(long, default_value_t = 64)]
    codebook_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// `name=path` or `path` (named by file stem); repeatable.
    #[arg(long = "sids", required = true)]
    sids: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64)]
    codebook_size: usize,
    /// Seed of the train/validation/test split and of the probe.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metric (`eval`) and probe (`probe`) report files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Write the table here instead of to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::ExportSids(a) => export(a),
        Command::Baseline(a) => baseline(a),
        Command::Eval(a) => evaluate(a),
        Command::Probe(a) => probe(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

enum CliError {
    Usage(String),
    Run(PipelineError),
}

impl<E: Into<PipelineError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Run(e.into())
    }
}

fn usage<T>(message: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(message.into()))
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
            Ok(())
        }
        _ => Ok(()),
    }
}

impl DataArgs {
    fn paths(&self) -> Result<(PathBuf, PathBuf, Option<PathBuf>), CliError> {
        let from_dir = |name: &str| self.data.as_ref().map(|d| d.join(name));
        let table = self.table.clone().or_else(|| from_dir(pipeline::TABLE_FILE));
        let samples = self.samples.clone().or_else(|| from_dir(pipeline::SAMPLES_FILE));
        let hierarchy = self
            .hierarchy
            .clone()
            .or_else(|| from_dir(pipeline::HIERARCHY_FILE).filter(|p| p.exists()));
        match (table, samples) {
            (Some(t), Some(s)) => Ok((t, s, hierarchy)),
            _ => usage("give --data DIR, or both --table and --samples"),
        }
    }

    fn load(&self) -> Result<Dataset, CliError> {
        let (table, samples, hierarchy) = self.paths()?;
        Ok(Dataset::load(&table, &samples, hierarchy.as_deref())?)
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(path) => read_json(path)?,
        None => match SyntheticConfig::profile(&a.profile) {
            Some(c) => c,
            None => return usage(format!("unknown profile {:?}; expected desk or tiny", a.profile)),
        },
    };
    let corpus = gen_synthetic(&cfg, a.seed).map_err(PipelineError::from)?;
    pipeline::write_corpus(&a.out, &corpus, &cfg)?;
    info!(
        "wrote {} items and {} samples to {}",
        corpus.table.n_items(),
        corpus.samples.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let Some(base) = TrainConfig::profile(&a.profile) else {
        return usage(format!("unknown profile {:?}; expected desk, tiny or production", a.profile));
    };
    let mut cfg = match &a.config {
        None => base,
        Some(path) => {
            // file values override the profile, flags override the file
            let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
            let patch: serde_json::Value = serde_json::from_str(&text).map_err(|source| PipelineError::Json {
                path: path.clone(),
                source,
            })?;
            let mut merged = serde_json::to_value(&base).expect("config serializes");
            match (merged.as_object_mut(), patch.as_object()) {
                (Some(m), Some(p)) => m.extend(p.clone()),
                _ => return usage(format!("{}: expected a JSON object", path.display())),
            }
            serde_json::from_value(merged).map_err(|source| PipelineError::Json {
                path: path.clone(),
                source,
            })?
        }
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    cfg.mlp_encoder |= a.mlp_encoder;
    cfg.unshared_codebook |= a.unshared_codebook;
    cfg.with_decoder |= a.with_decoder;
    cfg.mutual_first_layer_only |= a.mutual_first_layer_only;
    if a.data.data.is_some() || a.data.table.is_some() {
        let (t, s, h) = a.data.paths()?;
        cfg.table_path = Some(t);
        cfg.samples_path = Some(s);
        cfg.hierarchy_path = h;
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(&a)?;
    let (Some(table), Some(samples)) = (&cfg.table_path, &cfg.samples_path) else {
        return usage("no data: give --data DIR or set table_path and samples_path in the config");
    };
    let data = Dataset::load(table, samples, cfg.hierarchy_path.as_deref())?;
    if data.table.dim() != cfg.dim {
        return Err(CliError::Run(PipelineError::Mismatch(format!(
            "table has dimension {} but the config says dim = {}",
            data.table.dim(),
            cfg.dim
        ))));
    }
    let splits = split_811(data.samples.len(), cfg.seed);
    let out = training::train(&cfg, data.table.vectors(), &data.samples, &splits)?;
    fs::create_dir_all(&a.out).map_err(|e| PipelineError::io(&a.out, e))?;
    save_checkpoint(&out.checkpoint, &a.out.join(CHECKPOINT_FILE))?;
    let csv = a.out.join(METRICS_CSV_FILE);
    write_metrics_csv(&csv, &out.history).map_err(|e| PipelineError::io(&csv, e))?;
    write_json(&a.out.join(CONFIG_FILE), &cfg)?;
    info!(
        "best epoch {} (val auc {:.4}); wrote {}",
        out.checkpoint.epoch,
        out.history.iter().map(|r| r.val_auc).fold(f64::NEG_INFINITY, f64::max),
        a.out.display()
    );
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = a.data.load()?;
    let model = ckpt.model()?;
    let sids = export_item_sids(&model, &data.table);
    create_parent(&a.out)?;
    write_sids(&a.out, &sids)?;
    info!("wrote {} SIDs to {}", sids.len(), a.out.display());
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<(), CliError> {
    let (name, q) = match &a.kind {
        BaselineKind::RqKmeans(q) => ("rq-kmeans", q),
        BaselineKind::RqVae(q) => ("rq-vae", q),
    };
    if q.levels == 0 || q.codebook_size == 0 {
        return usage("--levels and --codebook-size must be >= 1");
    }
    let data = q.data.load()?;
    if data.table.n_items() < q.codebook_size {
        return usage(format!(
            "codebook size {} exceeds the catalog size {}",
            q.codebook_size,
            data.table.n_items()
        ));
    }
    let sids: Vec<SemanticId> = match a.kind {
        BaselineKind::RqKmeans(_) => rq_kmeans_fit(&data.table, q.levels, q.codebook_size, q.iters.unwrap_or(50), q.seed).1,
        BaselineKind::RqVae(_) => {
            let cfg = RqVaeConfig {
                levels: q.levels,
                codebook_size: q.codebook_size,
                epochs: q.iters.unwrap_or(RqVaeConfig::default().epochs),
                seed: q.seed,
                ..RqVaeConfig::default()
            };
            rq_vae_lite_train(&data.table, &cfg)?.1
        }
    };
    let table: Vec<(String, SemanticId)> = data.table.ids().iter().cloned().zip(sids).collect();
    create_parent(&q.out)?;
    write_sids(&q.out, &table)?;
    info!("{name}: wrote {} SIDs to {}", table.len(), q.out.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<(), CliError> {
    let data = a.data.load()?;
    let report = match (&a.checkpoint, &a.sids) {
        (Some(path), _) => {
            let ckpt = load_checkpoint(path)?;
            let model = ckpt.model()?;
            let splits = split_811(data.samples.len(), ckpt.config.seed);
            let (auc, f1) = training::evaluate(&model, data.table.vectors(), &data.subset(&splits.test));
            let sids: Vec<SemanticId> = export_item_sids(&model, &data.table).into_iter().map(|(_, s)| s).collect();
            let scheme = a.scheme.clone().unwrap_or_else(|| "dos".into());
            let mut r = sid_report(&scheme, &sids, ckpt.config.codebook_size, &data)?;
            r.auc = Some(auc);
            r.f1 = Some(f1);
            r.metadata.insert("checkpoint_epoch".into(), ckpt.epoch.to_string());
            r.metadata.insert("seed".into(), ckpt.config.seed.to_string());
            r
        }
        (None, Some(path)) => {
            let sids = align_sids(&data.table, &read_sids(path)?, a.codebook_size)?;
            let scheme = a.scheme.clone().unwrap_or_else(|| stem(path));
            sid_report(&scheme, &sids, a.codebook_size, &data)?
        }
        (None, None) => return usage("give --checkpoint or --sids"),
    };
    create_parent(&a.out)?;
    write_json(&a.out, &report)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "sids".into(), |s| s.to_string_lossy().into_owned())
}

fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let mut schemes = Vec::with_capacity(a.sids.len());
    for spec in &a.sids {
        let (name, path) = match spec.split_once('=') {
            Some((n, p)) if !n.is_empty() && !p.is_empty() => (n.to_string(), PathBuf::from(p)),
            Some(_) => return usage(format!("bad --sids value {spec:?}; expected name=path")),
            None => (stem(Path::new(spec)), PathBuf::from(spec)),
        };
        if schemes.iter().any(|(n, _)| n == &name) {
            return usage(format!("scheme {name:?} given twice"));
        }
        schemes.push((name, path));
    }
    let data = a.data.load()?;
    let splits = split_811(data.samples.len(), a.seed);
    let (train, test) = (data.subset(&splits.train), data.subset(&splits.test));
    let cfg = ProbeConfig {
        seed: a.seed,
        epochs: a.epochs.unwrap_or(ProbeConfig::default().epochs),
        ..ProbeConfig::default()
    };
    let mut report = ProbeReport::default();
    for (name, path) in schemes {
        let sids = align_sids(&data.table, &read_sids(&path)?, a.codebook_size)?;
        let hit = run_probe(&sids, a.codebook_size, &train, &test, &cfg)?;
        info!("{name}: hit@{} {hit:.4}", cfg.k);
        report.0.insert(name, hit);
    }
    create_parent(&a.out)?;
    report.save(&a.out).map_err(|e| PipelineError::io(&a.out, e))?;
    Ok(())
}

/// One row of the comparison table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportRow {
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub hit_at_10: Option<f64>,
    pub nmi_l1: Option<f64>,
    pub perplexity_l1: Option<f64>,
    pub utilization_l1: Option<f64>,
    pub collision_rate: Option<f64>,
}

/// Merges metric reports and probe reports by scheme name.
pub fn merge_reports(metrics: &[MetricReport], probes: &[ProbeReport]) -> BTreeMap<String, ReportRow> {
    let mut rows: BTreeMap<String, ReportRow> = BTreeMap::new();
    for m in metrics {
        let row = rows.entry(m.scheme.clone()).or_default();
        row.auc = m.auc.or(row.auc);
        row.f1 = m.f1.or(row.f1);
        if let Some(h) = m.hit_at_k.get("hit@10") {
            row.hit_at_10 = Some(*h);
        }
        row.nmi_l1 = m.nmi.first().copied().or(row.nmi_l1);
        if let Some(c) = m.codebook.first() {
            row.perplexity_l1 = Some(c.perplexity);
            row.utilization_l1 = Some(c.utilization);
        }
        row.collision_rate = Some(m.collision_rate);
    }
    for p in probes {
        for (scheme, hit) in &p.0 {
            rows.entry(scheme.clone()).or_default().hit_at_10 = Some(*hit);
        }
    }
    rows
}

/// Aligned plain-text table, one scheme per row.
pub fn render_table(rows: &BTreeMap<String, ReportRow>) -> String {
    let header = ["Scheme", "AUC", "F1", "Hit@10", "NMI-L1", "PPL-L1", "Util-L1", "Collision"];
    let cell = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"));
    let mut body: Vec<Vec<String>> = Vec::with_capacity(rows.len());
    for (scheme, r) in rows {
        body.push(vec![
            scheme.clone(),
            cell(r.auc, 4),
            cell(r.f1, 4),
            cell(r.hit_at_10, 4),
            cell(r.nmi_l1, 3),
            cell(r.perplexity_l1, 1),
            cell(r.utilization_l1, 2),
            cell(r.collision_rate, 4),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        for (c, v) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{v:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {v:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(&header.map(String::from));
    for r in &body {
        line(r);
    }
    out
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let (mut metrics, mut probes) = (Vec::new(), Vec::new());
    for path in &a.inputs {
        let value: serde_json::Value = read_json(path)?;
        let is_metric = value.get("scheme").is_some_and(|s| s.is_string());
        let parsed = if is_metric {
            serde_json::from_value(value).map(|m| metrics.push(m))
        } else {
            serde_json::from_value(value).map(|p| probes.push(p))
        };
        parsed.map_err(|source| PipelineError::Json {
            path: path.clone(),
            source,
        })?;
    }
    let table = render_table(&merge_reports(&metrics, &probes));
    match &a.out {
        Some(out) => {
            create_parent(out)?;
            fs::write(out, &table).map_err(|e| PipelineError::io(out, e))?;
        }
        None => print!("{table}"),
    }
    Ok(())
}
