//! Training loop, split evaluation and the shared-trunk timing benchmark.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, SplitTag, TaskField};
use crate::metrics::{
    argmax_rows, confusion_matrix, interval_accuracy, label_map, mae_years, sample_map, topk_accuracy, MetricsReport,
    TaskMetrics, PERIOD_TOLERANCE_YEARS,
};
use crate::model::{calibrate_weights_scales, inverse_frequency_weights, Calibration, LossBreakdown, MultiTaskModel, TaskKind, TaskSpec};
use crate::nncore::MomentumState;
use crate::{Error, Result};

/// Rows per forward pass when evaluating a whole split.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    Off,
    /// Derive weights and scales from validation losses after the first epoch, then freeze them.
    AfterWarmup,
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "none" => Ok(CalibrationMode::Off),
            "after-warmup" | "auto" | "on" => Ok(CalibrationMode::AfterWarmup),
            other => Err(Error::invalid(format!("unknown calibration mode '{other}' (off, after-warmup)"))),
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMode::Off => "off",
            CalibrationMode::AfterWarmup => "after-warmup",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hidden: usize,
    pub calibration: CalibrationMode,
    pub shuffle: bool,
    /// Print one line per epoch to standard error.
    #[serde(skip)]
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            hidden: 64,
            calibration: CalibrationMode::Off,
            shuffle: true,
            progress: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden size must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub tasks: Vec<String>,
    pub config: TrainConfig,
    pub epochs: Vec<EpochLog>,
    pub calibration: Option<Calibration>,
    /// Final `w_i`, `s_i`.
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut log = self.clone();
        log.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        log
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Task specs for the given fields: label names from the dataset
/// vocabularies, inverse-frequency class weights counted on the train split
/// (when `class_weighting`), and train-split standardization for the period.
pub fn task_specs(dataset: &FeatureDataset, fields: &[TaskField], class_weighting: bool) -> Result<Vec<TaskSpec>> {
    let train = dataset.rows_in(SplitTag::Train);
    let mut specs = Vec::with_capacity(fields.len());
    for &field in fields {
        let spec = match field {
            TaskField::Period => {
                let years: Vec<f64> = train.iter().filter_map(|&r| dataset.period[r]).collect();
                if years.is_empty() {
                    return Err(Error::invalid("no labeled period in the train split"));
                }
                let n = years.len() as f64;
                let mean = years.iter().sum::<f64>() / n;
                let std = (years.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
                let mut s = TaskSpec::regression(field.name());
                s.target_mean = Some(mean);
                s.target_std = Some(if std > 0.0 { std } else { 1.0 });
                s
            }
            _ => {
                let vocab = dataset
                    .vocabularies
                    .get(&field)
                    .ok_or_else(|| Error::invalid(format!("dataset has no '{field}' vocabulary")))?;
                let mut s = if field.kind() == TaskKind::Multiclass {
                    TaskSpec::multiclass(field.name(), vocab.len())
                } else {
                    TaskSpec::multilabel(field.name(), vocab.len())
                };
                if class_weighting && field == TaskField::Artist {
                    let mut counts = vec![0usize; vocab.len()];
                    for &r in &train {
                        if let Some(c) = dataset.artist[r] {
                            counts[c] += 1;
                        }
                    }
                    s.class_weights = Some(inverse_frequency_weights(&counts));
                }
                s.labels = Some(vocab.labels.clone());
                s
            }
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// Accumulates per-task mean losses over several batches, weighting each
/// task by its number of labeled rows.
struct LossAccumulator {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl LossAccumulator {
    fn new(tasks: usize) -> Self {
        Self {
            sums: vec![0.0; tasks],
            counts: vec![0; tasks],
        }
    }

    fn add(&mut self, raw: &[f64], labeled: &[usize]) {
        for i in 0..self.sums.len() {
            self.sums[i] += raw[i] * labeled[i] as f64;
            self.counts[i] += labeled[i];
        }
    }

    fn finish(&self, specs: &[TaskSpec]) -> LossBreakdown {
        let raw: Vec<f64> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        reweigh(&raw, specs)
    }
}

fn reweigh(raw: &[f64], specs: &[TaskSpec]) -> LossBreakdown {
    let weighted: Vec<f64> = raw.iter().zip(specs).map(|(l, s)| s.weight * s.scale * l).collect();
    LossBreakdown {
        per_task_raw: raw.to_vec(),
        total: weighted.iter().sum(),
        per_task_weighted: weighted,
    }
}

fn labeled_counts(dataset: &FeatureDataset, rows: &[usize], specs: &[TaskSpec]) -> Result<Vec<usize>> {
    specs
        .iter()
        .map(|s| {
            let f: TaskField = s.name.parse()?;
            Ok(rows.iter().filter(|&&r| dataset.has_label(f, r)).count())
        })
        .collect()
}

/// Mean per-task losses of `model` over `rows`, without touching parameters.
pub fn dataset_loss(model: &MultiTaskModel<f32>, dataset: &FeatureDataset, rows: &[usize]) -> Result<LossBreakdown> {
    let specs = model.specs();
    let mut acc = LossAccumulator::new(specs.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let batch = dataset.batch::<f32>(chunk, specs)?;
        let b = model.evaluate_loss(&batch)?;
        acc.add(&b.per_task_raw, &labeled_counts(dataset, chunk, specs)?);
    }
    Ok(acc.finish(specs))
}

/// Trains a fresh model on the train split and returns the parameters with
/// the lowest total validation loss (train loss when there is no validation
/// split) along with the per-epoch log.
pub fn train(
    dataset: &FeatureDataset,
    specs: &[TaskSpec],
    config: &TrainConfig,
) -> Result<(MultiTaskModel<f32>, TrainLog)> {
    config.validate()?;
    if specs.is_empty() {
        return Err(Error::invalid("at least one task is required"));
    }
    let mut train_rows = dataset.rows_in(SplitTag::Train);
    if train_rows.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let val_rows = dataset.rows_in(SplitTag::Val);

    let mut model = MultiTaskModel::<f32>::new(dataset.dim(), config.hidden, specs.to_vec(), config.seed)?;
    let mut state = MomentumState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0FBA_7C4E);
    let (lr, momentum) = (config.lr as f32, config.momentum as f32);

    let mut epochs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut calibration = None;
    let mut best: Option<(f64, usize, MultiTaskModel<f32>)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        if config.shuffle {
            train_rows.shuffle(&mut rng);
        }
        let mut acc = LossAccumulator::new(specs.len());
        for chunk in train_rows.chunks(config.batch_size) {
            let batch = dataset.batch::<f32>(chunk, model.specs())?;
            let b = model.backward_update(&batch, &mut state, lr, momentum)?;
            acc.add(&b.per_task_raw, &labeled_counts(dataset, chunk, specs)?);
        }
        let mut train_loss = acc.finish(model.specs());
        let mut val_loss = if val_rows.is_empty() {
            None
        } else {
            Some(dataset_loss(&model, dataset, &val_rows)?)
        };

        if epoch == 1 && config.calibration == CalibrationMode::AfterWarmup {
            let source = val_loss.as_ref().unwrap_or(&train_loss);
            // a task with zero loss would get an infinite weight
            let losses: Vec<f64> = source.per_task_raw.iter().map(|&l| l.max(1e-12)).collect();
            let kinds: Vec<TaskKind> = specs.iter().map(|s| s.kind).collect();
            let cal = calibrate_weights_scales(&losses, &kinds)?;
            model.set_weights_scales(&cal.weights, &cal.scales)?;
            train_loss = reweigh(&train_loss.per_task_raw, model.specs());
            val_loss = val_loss.map(|v| reweigh(&v.per_task_raw, model.specs()));
            calibration = Some(cal);
        }

        let seconds = start.elapsed().as_secs_f64();
        let selection = val_loss.as_ref().unwrap_or(&train_loss).total;
        if config.progress {
            let raw: Vec<String> = train_loss
                .per_task_raw
                .iter()
                .zip(specs)
                .map(|(l, s)| format!("{}={l:.4}", s.name))
                .collect();
            let val = val_loss.as_ref().map(|v| format!(" val={:.4}", v.total)).unwrap_or_default();
            eprintln!(
                "epoch {epoch}/{} {} total={:.4}{val} {seconds:.2}s",
                config.epochs,
                raw.join(" "),
                train_loss.total
            );
        }
        if best.as_ref().is_none_or(|(b, _, _)| selection < *b) {
            best = Some((selection, epoch, model.clone()));
        }
        epochs.push(EpochLog {
            epoch,
            train: train_loss,
            val: val_loss,
            seconds,
        });
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    let log = TrainLog {
        tasks: specs.iter().map(|s| s.name.clone()).collect(),
        config: config.clone(),
        epochs,
        calibration,
        weights: best_model.specs().iter().map(|s| s.weight).collect(),
        scales: best_model.specs().iter().map(|s| s.scale).collect(),
        best_epoch,
    };
    Ok((best_model, log))
}

/// Anything that maps feature rows to per-task outputs: logits for
/// classification heads, standardized values for regression heads.
pub trait Predictor {
    fn specs(&self) -> &[TaskSpec];
    fn predict(&self, inputs: ArrayView2<f32>) -> Result<Vec<Array2<f64>>>;
}

impl Predictor for MultiTaskModel<f32> {
    fn specs(&self) -> &[TaskSpec] {
        MultiTaskModel::specs(self)
    }

    fn predict(&self, inputs: ArrayView2<f32>) -> Result<Vec<Array2<f64>>> {
        let fwd = self.forward_all_tasks(inputs)?;
        Ok(fwd.outputs.into_iter().map(|o| o.mapv(f64::from)).collect())
    }
}

/// Computes every configured task's metrics on one split in a single pass.
pub fn evaluate_epoch<P: Predictor + ?Sized>(model: &P, dataset: &FeatureDataset, split: SplitTag) -> Result<MetricsReport> {
    let rows = dataset.rows_in(split);
    if rows.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name())));
    }
    let specs = model.specs();
    let mut outputs: Vec<Array2<f64>> = specs.iter().map(|s| Array2::zeros((0, s.output_dim))).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = dataset.features.select(Axis(0), chunk);
        let out = model.predict(x.view())?;
        if out.len() != specs.len() {
            return Err(Error::dims(format!("{} outputs for {} tasks", out.len(), specs.len())));
        }
        for (acc, o) in outputs.iter_mut().zip(out) {
            acc.append(Axis(0), o.view()).map_err(|e| Error::dims(e.to_string()))?;
        }
    }

    let mut tasks = BTreeMap::new();
    for (spec, out) in specs.iter().zip(&outputs) {
        let field: TaskField = spec.name.parse()?;
        let labeled: Vec<usize> = (0..rows.len()).filter(|&i| dataset.has_label(field, rows[i])).collect();
        let mut m = TaskMetrics::empty(spec.kind);
        m.samples = labeled.len();
        if !labeled.is_empty() {
            let scores = out.select(Axis(0), &labeled);
            match field {
                TaskField::Artist => {
                    let truth: Vec<usize> = labeled.iter().map(|&i| dataset.artist[rows[i]].unwrap()).collect();
                    let k = spec.output_dim;
                    m.top1 = Some(topk_accuracy(scores.view(), &truth, 1)?);
                    m.top3 = Some(topk_accuracy(scores.view(), &truth, k.min(3))?);
                    let mut cm = confusion_matrix(&argmax_rows(scores.view()), &truth, k)?;
                    if let Some(labels) = &spec.labels {
                        cm = cm.with_labels(labels.clone())?;
                    }
                    m.confusion = Some(cm);
                }
                TaskField::Type | TaskField::Material => {
                    let col = if field == TaskField::Type { &dataset.types } else { &dataset.materials };
                    let mut truth = Array2::from_elem(scores.dim(), false);
                    for (j, &i) in labeled.iter().enumerate() {
                        for &id in col[rows[i]].iter().flatten() {
                            if id < spec.output_dim {
                                truth[[j, id]] = true;
                            }
                        }
                    }
                    m.map = Some(sample_map(scores.view(), truth.view())?);
                    m.label_map = label_map(scores.view(), truth.view()).ok();
                }
                TaskField::Period => {
                    let mean = spec.target_mean.unwrap_or(0.0);
                    let std = spec.target_std.unwrap_or(1.0);
                    let pred: Vec<f64> = scores.column(0).to_vec();
                    let years: Vec<f64> = labeled.iter().map(|&i| dataset.period[rows[i]].unwrap()).collect();
                    let truth_z: Vec<f64> = years.iter().map(|y| (y - mean) / std).collect();
                    m.mae_years = Some(mae_years(&pred, &truth_z, mean, std)?);
                    let pred_years: Vec<f64> = pred.iter().map(|&z| spec.destandardize(z)).collect();
                    m.interval_accuracy = Some(interval_accuracy(&pred_years, &years, PERIOD_TOLERANCE_YEARS)?);
                }
            }
        }
        tasks.insert(spec.name.clone(), m);
    }
    Ok(MetricsReport {
        split: split.name().to_string(),
        tasks,
    })
}

/// Wall-clock comparison of one multi-task pass against one single-task
/// pass per head, each recomputing the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_dim: usize,
    pub hidden: usize,
    pub task_dims: Vec<usize>,
    pub batches: usize,
    pub batch_size: usize,
    pub multi_seconds: f64,
    pub single_seconds: Vec<f64>,
    pub single_seconds_total: f64,
    /// `single_seconds_total / multi_seconds`.
    pub measured_ratio: f64,
    pub flops_multi: u64,
    pub flops_single_total: u64,
    pub flop_ratio: f64,
}

pub const BENCH_WARMUP_PASSES: usize = 3;

/// Times `n_batches` forward passes (cycling through `pool`) of the full
/// model and of each head alone. Each timed configuration first runs
/// [`BENCH_WARMUP_PASSES`] discarded passes.
pub fn benchmark_multitask_vs_single(
    model: &MultiTaskModel<f32>,
    pool: &[Array2<f32>],
    n_batches: usize,
) -> Result<BenchReport> {
    let n_tasks = model.specs().len();
    if n_tasks < 2 {
        return Err(Error::invalid("benchmark needs at least 2 tasks"));
    }
    if n_batches == 0 {
        return Err(Error::invalid("benchmark needs at least 1 batch"));
    }
    let batch_size = pool.first().map(|b| b.nrows()).ok_or_else(|| Error::invalid("empty batch pool"))?;
    if batch_size == 0 || pool.iter().any(|b| b.nrows() != batch_size || b.ncols() != model.input_dim()) {
        return Err(Error::dims("pool batches must share a non-zero size and the model input width"));
    }

    let time = |f: &dyn Fn(ArrayView2<f32>) -> Result<()>| -> Result<f64> {
        let pass = || -> Result<()> {
            for i in 0..n_batches {
                f(pool[i % pool.len()].view())?;
            }
            Ok(())
        };
        for _ in 0..BENCH_WARMUP_PASSES {
            pass()?;
        }
        let start = Instant::now();
        pass()?;
        Ok(start.elapsed().as_secs_f64())
    };

    let multi_seconds = time(&|x| model.forward_all_tasks(x).map(|fwd| drop(std::hint::black_box(fwd))))?;
    let single_seconds = (0..n_tasks)
        .map(|t| time(&|x| model.forward_task(x, t).map(|o| drop(std::hint::black_box(o)))))
        .collect::<Result<Vec<f64>>>()?;
    let single_seconds_total: f64 = single_seconds.iter().sum();

    let all: Vec<usize> = (0..n_tasks).collect();
    let rows = n_batches * batch_size;
    let flops_multi = model.flop_count(&all, rows);
    let flops_single_total = model.single_task_flop_total(rows);
    Ok(BenchReport {
        input_dim: model.input_dim(),
        hidden: model.hidden_dim(),
        task_dims: model.output_dims(),
        batches: n_batches,
        batch_size,
        multi_seconds,
        single_seconds,
        single_seconds_total,
        measured_ratio: single_seconds_total / multi_seconds,
        flops_multi,
        flops_single_total,
        flop_ratio: flops_single_total as f64 / flops_multi as f64,
    })
}

/// Benchmark on a freshly initialized model with random inputs.
pub fn benchmark_random(
    input_dim: usize,
    hidden: usize,
    task_dims: &[usize],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BenchReport> {
    if task_dims.len() < 2 {
        return Err(Error::invalid("benchmark needs at least 2 tasks"));
    }
    if n_batches == 0 || batch_size == 0 {
        return Err(Error::invalid("batches and batch size must be >= 1"));
    }
    let specs: Vec<TaskSpec> = task_dims
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            if k == 1 {
                TaskSpec::regression(&format!("task{i}"))
            } else {
                TaskSpec::multiclass(&format!("task{i}"), k)
            }
        })
        .collect();
    let model = MultiTaskModel::<f32>::new(input_dim, hidden, specs, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<Array2<f32>> = (0..n_batches.min(8))
        .map(|_| Array2::from_shape_simple_fn((batch_size, input_dim), || rng.random::<f32>()))
        .collect();
    benchmark_multitask_vs_single(&model, &pool, n_batches)
}
