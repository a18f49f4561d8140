//! The `mtl` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 runtime error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{run_query, top_confusions, ConditionalQuery, CooccurrenceTable, DEFAULT_PERIOD_BIN};
use crate::data::{
    generate_synthetic, load_feature_matrix, read_metadata, split_records, validate_ratios, write_feature_matrix,
    write_metadata, FeatureDataset, LabelVocabulary, SplitFile, SplitTag, SynthConfig, TaskField,
};
use crate::engine::{benchmark_random, evaluate_epoch, task_specs, train, CalibrationMode, TrainConfig};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, MultiTaskModel, TaskKind};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "mtl", version, about = "Multi-task learning over precomputed feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stratified train/val/test split by anchor-task class
    Split(SplitArgs),
    /// Train a multi-task model
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Time one multi-task pass against per-task passes
    Bench(BenchArgs),
    /// Conditional label probabilities and confusion ranking
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset with correlated tasks
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value = "artist")]
    pub anchor_task: String,
    #[arg(long, default_value = "0.7,0.2,0.1")]
    pub ratios: String,
    /// Classes with fewer samples are left out of the split
    #[arg(long, default_value_t = 3)]
    pub min_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value = "artist,type,material,period")]
    pub tasks: String,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibrate task weights and scales after the first epoch
    #[arg(long)]
    pub calibrate: bool,
    /// Drop type/material labels seen in fewer train samples
    #[arg(long, default_value_t = 1)]
    pub min_label_samples: usize,
    /// Disable inverse-frequency class weights on the artist task
    #[arg(long)]
    pub no_class_weights: bool,
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long)]
    pub out_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report path; standard output when omitted
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for `confusion_<task>.csv`; defaults to the report's directory
    #[arg(long)]
    pub confusion_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 2048)]
    pub features_dims: usize,
    #[arg(long, default_value = "100,50,50,1")]
    pub tasks_dims: String,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 200)]
    pub batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Checkpoint whose artist confusion matrix is ranked (needs --features and --splits)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Saved confusion matrix CSV
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// `T1[=v]|T2[=v],T3[=v]`, e.g. `artist|period=1625,material=oil`
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub top_confusions: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_PERIOD_BIN)]
    pub bin_width: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.9)]
    pub entanglement: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_features: PathBuf,
    #[arg(long)]
    pub out_meta: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::UndefinedMetric(_) => Failure::Runtime(e),
            _ => Failure::Data(e),
        }
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            3
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<Vec<T>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("bad {what} '{p}' in '{s}'"))))
        .collect()
}

fn write_json(value: &impl Serialize, out: Option<&Path>) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(Error::from)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_split(a: SplitArgs) -> CmdResult {
    let anchor: TaskField = a.anchor_task.parse().map_err(usage)?;
    if anchor == TaskField::Period {
        return Err(usage("the anchor task must be categorical"));
    }
    let r: Vec<f64> = parse_list(&a.ratios, "ratio")?;
    let ratios: [f64; 3] = r.try_into().map_err(|_| usage("--ratios needs three values: train,val,test"))?;
    validate_ratios(ratios).map_err(usage)?;
    if a.min_samples < 3 {
        return Err(usage("--min-samples must be >= 3 so every class can be split"));
    }
    let records = read_metadata(&a.meta)?;
    let split = split_records(&records, anchor, ratios, a.min_samples, a.seed)?;
    split.write(&a.out)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tag in split.assignments.values() {
        *counts.entry(tag.name()).or_default() += 1;
    }
    eprintln!("split {} samples: {counts:?}", records.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let fields = crate::data::parse_task_list(&a.tasks).map_err(usage)?;
    let config = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        seed: a.seed,
        hidden: a.hidden,
        calibration: if a.calibrate { CalibrationMode::AfterWarmup } else { CalibrationMode::Off },
        shuffle: !a.no_shuffle,
        progress: !a.quiet,
    };
    config.validate().map_err(usage)?;
    if a.min_label_samples == 0 {
        return Err(usage("--min-label-samples must be >= 1"));
    }

    let features = load_feature_matrix(&a.features)?;
    let records = read_metadata(&a.meta)?;
    let split = SplitFile::read(&a.splits)?;
    let ds = FeatureDataset::build(features, &records, &split, &fields, a.min_label_samples)?;
    let specs = task_specs(&ds, &fields, !a.no_class_weights)?;
    let (model, log) = train(&ds, &specs, &config)?;
    save_checkpoint(&model, &a.out_model)?;
    if let Some(p) = &a.out_log {
        std::fs::write(p, log.to_json()?).map_err(Error::from)?;
    }
    Ok(())
}

/// Rebuilds label vocabularies from a checkpoint's task specs so evaluation
/// uses the training-time ids.
fn dataset_for_model(model: &MultiTaskModel<f32>, features: &Path, meta: &Path, splits: &Path) -> Result<FeatureDataset, Failure> {
    let mut vocabularies = BTreeMap::new();
    for spec in model.specs() {
        let field: TaskField = spec.name.parse()?;
        if spec.kind.is_classification() {
            let labels = spec
                .labels
                .clone()
                .ok_or_else(|| Error::invalid(format!("checkpoint task '{}' has no label names", spec.name)))?;
            vocabularies.insert(field, LabelVocabulary::from_labels(field, labels)?);
        }
    }
    let features = load_feature_matrix(features)?;
    if features.ncols() != model.input_dim() {
        return Err(Error::dims(format!("features have {} columns, model expects {}", features.ncols(), model.input_dim())).into());
    }
    let records = read_metadata(meta)?;
    let split = SplitFile::read(splits)?;
    Ok(FeatureDataset::assemble(features, &records, &split, vocabularies)?)
}

fn evaluate(model_path: &Path, features: &Path, meta: &Path, splits: &Path, split: &str) -> Result<MetricsReport, Failure> {
    let tag: SplitTag = split.parse().map_err(usage)?;
    let model = load_checkpoint(model_path)?;
    let ds = dataset_for_model(&model, features, meta, splits)?;
    Ok(evaluate_epoch(&model, &ds, tag)?)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let report = evaluate(&a.model, &a.features, &a.meta, &a.splits, &a.split)?;
    write_json(&report, a.report.as_deref())?;
    let dir = a
        .confusion_dir
        .clone()
        .or_else(|| a.report.as_ref().map(|r| r.parent().map(Path::to_path_buf).unwrap_or_default()));
    if let Some(dir) = dir {
        for (task, m) in &report.tasks {
            if let Some(cm) = &m.confusion {
                cm.write_csv(dir.join(format!("confusion_{task}.csv")))?;
            }
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let dims: Vec<usize> = parse_list(&a.tasks_dims, "task dimension")?;
    if dims.len() < 2 {
        return Err(usage("benchmark needs at least 2 tasks in --tasks-dims"));
    }
    if dims.contains(&0) || a.features_dims == 0 || a.hidden == 0 {
        return Err(usage("dimensions must be >= 1"));
    }
    if a.batches == 0 || a.batch == 0 {
        return Err(usage("--batches and --batch must be >= 1"));
    }
    let report = benchmark_random(a.features_dims, a.hidden, &dims, a.batches, a.batch, a.seed)?;
    eprintln!(
        "multi-task {:.3}s, single-task total {:.3}s, measured ratio {:.2}, flop ratio {:.2}",
        report.multi_seconds, report.single_seconds_total, report.measured_ratio, report.flop_ratio
    );
    write_json(&report, a.out.as_deref())
}

#[derive(Debug, Serialize)]
struct AnalyzeOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<QueryOutput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_confusions: Option<Vec<crate::analysis::ConfusionPair>>,
}

#[derive(Debug, Serialize)]
struct QueryOutput {
    expression: String,
    fields: [TaskField; 3],
    bin_width: f64,
    rows: Vec<crate::analysis::QueryRow>,
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    if a.query.is_none() && a.top_confusions.is_none() {
        return Err(usage("nothing to do: pass --query and/or --top-confusions"));
    }
    let query: Option<ConditionalQuery> = a.query.as_deref().map(str::parse).transpose().map_err(usage)?;
    if query.is_some() && a.meta.is_none() {
        return Err(usage("--query needs --meta"));
    }
    if !(a.bin_width > 0.0 && a.bin_width.is_finite()) {
        return Err(usage("--bin-width must be > 0"));
    }
    if a.top_confusions == Some(0) {
        return Err(usage("--top-confusions must be >= 1"));
    }
    if a.top_confusions.is_some() && a.confusion.is_none() && a.model.is_none() {
        return Err(usage("--top-confusions needs --confusion or --model"));
    }
    if a.model.is_some() && (a.features.is_none() || a.splits.is_none() || a.meta.is_none()) {
        return Err(usage("--model needs --features, --splits and --meta"));
    }

    let mut output = AnalyzeOutput {
        query: None,
        top_confusions: None,
    };
    if let (Some(q), Some(meta)) = (&query, &a.meta) {
        let records = read_metadata(meta)?;
        let table = CooccurrenceTable::from_records(&records, q.fields, a.bin_width)?;
        output.query = Some(QueryOutput {
            expression: a.query.clone().unwrap_or_default(),
            fields: q.fields,
            bin_width: a.bin_width,
            rows: run_query(&table, q)?,
        });
    }
    if let Some(n) = a.top_confusions {
        let cm = match (&a.confusion, &a.model) {
            (Some(path), _) => ConfusionMatrix::read_csv(path)?,
            (None, Some(model)) => {
                let report = evaluate(
                    model,
                    a.features.as_deref().unwrap(),
                    a.meta.as_deref().unwrap(),
                    a.splits.as_deref().unwrap(),
                    &a.split,
                )?;
                report
                    .tasks
                    .into_values()
                    .find(|m| m.kind == TaskKind::Multiclass)
                    .and_then(|m| m.confusion)
                    .ok_or_else(|| Error::invalid("model has no multiclass task with samples in this split"))?
            }
            (None, None) => unreachable!("checked above"),
        };
        output.top_confusions = Some(top_confusions(&cm, n)?);
    }
    write_json(&output, a.out.as_deref())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&a.entanglement) {
        return Err(usage(format!("--entanglement must lie in [0, 1], got {}", a.entanglement)));
    }
    if a.classes == 0 || a.per_class == 0 || a.dim == 0 {
        return Err(usage("--classes, --per-class and --dim must be >= 1"));
    }
    let data = generate_synthetic(&SynthConfig::new(a.classes, a.per_class, a.dim, a.entanglement, a.seed))?;
    write_feature_matrix(&a.out_features, &data.features)?;
    write_metadata(&a.out_meta, &data.records)?;
    Ok(())
}
