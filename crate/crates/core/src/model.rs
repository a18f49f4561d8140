//! The multi-task network: one shared rectified dense layer feeding a linear
//! head per task, the weighted and scaled combined loss, task weight
//! calibration, cost accounting and the binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nncore::{
    mae_loss, optimizer_step, relu, relu_backward, sigmoid_bce, softmax_xent, DenseLayer, GradientBundle,
    MomentumState, Scalar,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
    Regression,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::Regression)
    }
}

/// One prediction task and its place in the combined loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub output_dim: usize,
    /// Loss weight `w_i`.
    pub weight: f64,
    /// Loss scale `s_i`.
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
    /// Label strings by output index, for classification tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    /// Standardization of regression targets: `z = (y - mean) / std`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_std: Option<f64>,
}

/// Default loss scale for regression heads; mean absolute losses run an
/// order of magnitude above the classification losses.
pub const DEFAULT_REGRESSION_SCALE: f64 = 0.1;

impl TaskSpec {
    fn base(name: &str, kind: TaskKind, output_dim: usize, scale: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            output_dim,
            weight: 1.0,
            scale,
            class_weights: None,
            labels: None,
            target_mean: None,
            target_std: None,
        }
    }

    pub fn multiclass(name: &str, classes: usize) -> Self {
        Self::base(name, TaskKind::Multiclass, classes, 1.0)
    }

    pub fn multilabel(name: &str, labels: usize) -> Self {
        Self::base(name, TaskKind::Multilabel, labels, 1.0)
    }

    pub fn regression(name: &str) -> Self {
        Self::base(name, TaskKind::Regression, 1, DEFAULT_REGRESSION_SCALE)
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 {
            return Err(Error::invalid(format!("task '{}': output_dim must be >= 1", self.name)));
        }
        if self.kind == TaskKind::Regression && self.output_dim != 1 {
            return Err(Error::invalid(format!("task '{}': regression output_dim must be 1", self.name)));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::invalid(format!("task '{}': weight must be >= 0", self.name)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("task '{}': scale must be > 0", self.name)));
        }
        if let Some(cw) = &self.class_weights {
            if self.kind != TaskKind::Multiclass {
                return Err(Error::invalid(format!("task '{}': class weights apply to multiclass only", self.name)));
            }
            if cw.len() != self.output_dim || cw.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return Err(Error::invalid(format!("task '{}': bad class weights", self.name)));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.output_dim {
                return Err(Error::invalid(format!("task '{}': {} labels for {} outputs", self.name, labels.len(), self.output_dim)));
            }
        }
        Ok(())
    }

    /// Converts a standardized regression output back to the target unit.
    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.target_std.unwrap_or(1.0) + self.target_mean.unwrap_or(0.0)
    }
}

/// Inverse-frequency class weights normalized to mean 1. Classes that never
/// occur get the mean of the observed raw weights before normalization.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let raw: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; counts.len()];
    }
    let fill = present.iter().sum::<f64>() / present.len() as f64;
    let filled: Vec<f64> = raw.iter().map(|r| r.unwrap_or(fill)).collect();
    let mean = filled.iter().sum::<f64>() / filled.len() as f64;
    filled.iter().map(|w| w / mean).collect()
}

/// Targets of one task for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    MultiHot(Array2<T>),
    Values(Array1<T>),
}

impl<T> Targets<T> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::MultiHot(m) => m.nrows(),
            Targets::Values(v) => v.len(),
        }
    }
}

/// Targets plus an optional per-row mask; rows with `false` are unlabeled
/// for this task and contribute neither loss nor gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBlock<T> {
    pub targets: Targets<T>,
    pub labeled: Option<Vec<bool>>,
}

impl<T> From<Targets<T>> for TargetBlock<T> {
    fn from(targets: Targets<T>) -> Self {
        Self { targets, labeled: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub inputs: Array2<T>,
    pub targets: Vec<TargetBlock<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Array2<T>, targets: Vec<TargetBlock<T>>) -> Result<Self> {
        let b = inputs.nrows();
        if b == 0 {
            return Err(Error::invalid("batch must contain at least one row"));
        }
        for (i, block) in targets.iter().enumerate() {
            if block.targets.len() != b {
                return Err(Error::dims(format!("target block {i} has {} rows, batch has {b}", block.targets.len())));
            }
            if block.labeled.as_ref().is_some_and(|m| m.len() != b) {
                return Err(Error::dims(format!("target block {i} mask length mismatch")));
            }
            if let Targets::MultiHot(m) = &block.targets {
                if m.iter().any(|&v| v != T::zero() && v != T::one()) {
                    return Err(Error::invalid(format!("target block {i}: multi-hot entries must be 0 or 1")));
                }
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Per-task raw losses `L_i`, weighted losses `w_i s_i L_i` and their sum `L_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_task_raw: Vec<f64>,
    pub per_task_weighted: Vec<f64>,
    pub total: f64,
}

/// `L_t = sum_i w_i s_i L_i`. Returns the breakdown and each task's gradient
/// multiplied by `w_i s_i`.
pub fn combined_loss<T: Scalar>(
    per_task: Vec<(T, Array2<T>)>,
    specs: &[TaskSpec],
) -> Result<(LossBreakdown, Vec<Array2<T>>)> {
    if per_task.len() != specs.len() {
        return Err(Error::invalid(format!("{} task losses for {} task specs", per_task.len(), specs.len())));
    }
    let mut raw = Vec::with_capacity(specs.len());
    let mut weighted = Vec::with_capacity(specs.len());
    let mut grads = Vec::with_capacity(specs.len());
    for ((loss, grad), spec) in per_task.into_iter().zip(specs) {
        let factor = spec.weight * spec.scale;
        let l = loss.as_f64();
        raw.push(l);
        weighted.push(factor * l);
        grads.push(grad * T::of(factor));
    }
    let total = weighted.iter().sum();
    Ok((
        LossBreakdown {
            per_task_raw: raw,
            per_task_weighted: weighted,
            total,
        },
        grads,
    ))
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub pre_activation: Array2<T>,
    pub shared: Array2<T>,
    pub outputs: Vec<Array2<T>>,
}

/// Shared dense layer (`D -> H`, rectified) plus one linear head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel<T> {
    shared: DenseLayer<T>,
    heads: Vec<DenseLayer<T>>,
    specs: Vec<TaskSpec>,
}

/// Builds a freshly initialized model; deterministic for a fixed seed.
pub fn build_model<T: Scalar>(input_dim: usize, hidden: usize, specs: Vec<TaskSpec>, seed: u64) -> Result<MultiTaskModel<T>> {
    MultiTaskModel::new(input_dim, hidden, specs, seed)
}

impl<T: Scalar> MultiTaskModel<T> {
    pub fn new(input_dim: usize, hidden: usize, specs: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::invalid("input and hidden dimensions must be >= 1"));
        }
        if specs.is_empty() {
            return Err(Error::invalid("at least one task spec is required"));
        }
        for spec in &specs {
            spec.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = DenseLayer::glorot(input_dim, hidden, &mut rng)?;
        let heads = specs
            .iter()
            .map(|s| DenseLayer::glorot(hidden, s.output_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shared, heads, specs })
    }

    pub fn from_parts(shared: DenseLayer<T>, heads: Vec<DenseLayer<T>>, specs: Vec<TaskSpec>) -> Result<Self> {
        if specs.is_empty() || heads.len() != specs.len() {
            return Err(Error::invalid(format!("{} heads for {} task specs", heads.len(), specs.len())));
        }
        for (head, spec) in heads.iter().zip(&specs) {
            spec.validate()?;
            if head.in_dim() != shared.out_dim() || head.out_dim() != spec.output_dim {
                return Err(Error::dims(format!(
                    "head for '{}' is {}x{}, expected {}x{}",
                    spec.name,
                    head.out_dim(),
                    head.in_dim(),
                    spec.output_dim,
                    shared.out_dim()
                )));
            }
        }
        Ok(Self { shared, heads, specs })
    }

    pub fn input_dim(&self) -> usize {
        self.shared.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.shared.out_dim()
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn shared(&self) -> &DenseLayer<T> {
        &self.shared
    }

    pub fn heads(&self) -> &[DenseLayer<T>] {
        &self.heads
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Replaces every task's `w_i` and `s_i`.
    pub fn set_weights_scales(&mut self, weights: &[f64], scales: &[f64]) -> Result<()> {
        if weights.len() != self.specs.len() || scales.len() != self.specs.len() {
            return Err(Error::invalid("one weight and one scale per task required"));
        }
        let mut specs = self.specs.clone();
        for ((spec, &w), &s) in specs.iter_mut().zip(weights).zip(scales) {
            spec.weight = w;
            spec.scale = s;
            spec.validate()?;
        }
        self.specs = specs;
        Ok(())
    }

    /// `D*H + H + sum_i (H*K_i + K_i)`.
    pub fn param_count(&self) -> usize {
        param_count(self.input_dim(), self.hidden_dim(), &self.output_dims())
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.output_dim).collect()
    }

    pub fn cast<U: Scalar>(&self) -> MultiTaskModel<U> {
        MultiTaskModel {
            shared: self.shared.cast(),
            heads: self.heads.iter().map(DenseLayer::cast).collect(),
            specs: self.specs.clone(),
        }
    }

    /// Rectified shared activations `relu(x W^T + b)` with the pre-activation.
    pub fn shared_forward(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Array2<T>)> {
        let pre = self.shared.forward(x)?;
        let act = relu(pre.view());
        Ok((pre, act))
    }

    /// Computes the trunk once and feeds it to every head.
    pub fn forward_all_tasks(&self, x: ArrayView2<T>) -> Result<ForwardPass<T>> {
        let (pre_activation, shared) = self.shared_forward(x)?;
        let outputs = self
            .heads
            .iter()
            .map(|h| h.forward(shared.view()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass {
            pre_activation,
            shared,
            outputs,
        })
    }

    /// Single-task evaluation path: recomputes the trunk for one head.
    pub fn forward_task(&self, x: ArrayView2<T>, task: usize) -> Result<Array2<T>> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::invalid(format!("no task with index {task}")))?;
        let (_, shared) = self.shared_forward(x)?;
        head.forward(shared.view())
    }

    fn task_loss(&self, task: usize, logits: ArrayView2<T>, block: &TargetBlock<T>) -> Result<(T, Array2<T>)> {
        let spec = &self.specs[task];
        let b = logits.nrows();
        let rows: Option<Vec<usize>> = block
            .labeled
            .as_ref()
            .map(|m| m.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect());
        if rows.as_ref().is_some_and(|r| r.is_empty()) {
            return Ok((T::zero(), Array2::zeros(logits.dim())));
        }
        let pick = |r: &[usize]| logits.select(Axis(0), r);
        let (loss, grad) = match (&block.targets, spec.kind) {
            (Targets::Classes(classes), TaskKind::Multiclass) => {
                let cw: Vec<T> = match &spec.class_weights {
                    Some(w) => w.iter().map(|&v| T::of(v)).collect(),
                    None => vec![T::one(); spec.output_dim],
                };
                match &rows {
                    Some(r) => {
                        let t: Vec<usize> = r.iter().map(|&i| classes[i]).collect();
                        softmax_xent(pick(r).view(), &t, &cw)?
                    }
                    None => softmax_xent(logits, classes, &cw)?,
                }
            }
            (Targets::MultiHot(hot), TaskKind::Multilabel) => match &rows {
                Some(r) => sigmoid_bce(pick(r).view(), hot.select(Axis(0), r).view())?,
                None => sigmoid_bce(logits, hot.view())?,
            },
            (Targets::Values(values), TaskKind::Regression) => {
                let (loss, g) = match &rows {
                    Some(r) => mae_loss(pick(r).column(0), values.select(Axis(0), r).view())?,
                    None => mae_loss(logits.column(0), values.view())?,
                };
                (loss, g.insert_axis(Axis(1)))
            }
            _ => {
                return Err(Error::invalid(format!(
                    "targets for task '{}' do not match its kind {:?}",
                    spec.name, spec.kind
                )))
            }
        };
        match rows {
            Some(r) => {
                let mut full = Array2::zeros((b, logits.ncols()));
                for (src, &dst) in r.iter().enumerate() {
                    full.row_mut(dst).assign(&grad.row(src));
                }
                Ok((loss, full))
            }
            None => Ok((loss, grad)),
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        if batch.targets.len() != self.specs.len() {
            return Err(Error::invalid(format!(
                "batch has {} target blocks, model has {} tasks",
                batch.targets.len(),
                self.specs.len()
            )));
        }
        if batch.inputs.ncols() != self.input_dim() {
            return Err(Error::dims(format!(
                "batch has {} features, model expects {}",
                batch.inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass plus per-task losses and the combined loss, without gradients
    /// into the parameters.
    pub fn evaluate_loss(&self, batch: &Batch<T>) -> Result<LossBreakdown> {
        self.check_batch(batch)?;
        let fwd = self.forward_all_tasks(batch.inputs.view())?;
        let per_task = fwd
            .outputs
            .iter()
            .enumerate()
            .map(|(i, out)| self.task_loss(i, out.view(), &batch.targets[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(combined_loss(per_task, &self.specs)?.0)
    }

    /// Combined loss and the gradient of `L_t` with respect to every parameter
    /// array, in the order `[shared.W, shared.b, head_0.W, head_0.b, ...]`.
    pub fn loss_and_gradients(&self, batch: &Batch<T>) -> Result<(LossBreakdown, GradientBundle<T>)> {
        self.check_batch(batch)?;
        let fwd = self.forward_all_tasks(batch.inputs.view())?;
        let per_task = fwd
            .outputs
            .iter()
            .enumerate()
            .map(|(i, out)| self.task_loss(i, out.view(), &batch.targets[i]))
            .collect::<Result<Vec<_>>>()?;
        let (breakdown, head_grads) = combined_loss(per_task, &self.specs)?;

        let mut d_shared = Array2::<T>::zeros(fwd.shared.dim());
        let mut head_arrays = Vec::with_capacity(2 * self.heads.len());
        for (head, g) in self.heads.iter().zip(&head_grads) {
            let lg = head.backward(fwd.shared.view(), g.view())?;
            d_shared += &lg.input;
            head_arrays.push(lg.weights.into_dyn());
            head_arrays.push(lg.bias.into_dyn());
        }
        let d_pre = relu_backward(fwd.pre_activation.view(), d_shared.view());
        let (gw, gb) = self.shared.param_grads(batch.inputs.view(), d_pre.view());

        let mut arrays = Vec::with_capacity(2 + head_arrays.len());
        arrays.push(gw.into_dyn());
        arrays.push(gb.into_dyn());
        arrays.extend(head_arrays);
        Ok((breakdown, GradientBundle { arrays }))
    }

    /// Mutable parameter views in gradient-bundle order.
    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out: Vec<ArrayViewMutD<'_, T>> = self.shared.params_mut().into_iter().collect();
        for h in &mut self.heads {
            out.extend(h.params_mut());
        }
        out
    }

    /// One SGD step on the combined loss. Returns the loss measured before the update.
    pub fn backward_update(
        &mut self,
        batch: &Batch<T>,
        state: &mut MomentumState<T>,
        lr: T,
        momentum: T,
    ) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.loss_and_gradients(batch)?;
        let mut params = self.params_mut();
        optimizer_step(&mut params, &grads, state, lr, momentum)?;
        Ok(breakdown)
    }

    /// All parameters flattened in gradient-bundle order.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in std::iter::once(&self.shared).chain(&self.heads) {
            out.extend(layer.weights().iter().copied());
            out.extend(layer.bias().iter().copied());
        }
        out
    }

    /// Overwrites all parameters from a flat vector in gradient-bundle order.
    pub fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dims(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut offset = 0;
        for mut view in self.params_mut() {
            for v in view.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Multiply-accumulate count for evaluating the given heads over a batch,
    /// computing the trunk once.
    pub fn flop_count(&self, tasks: &[usize], batch: usize) -> u64 {
        let dims: Vec<usize> = tasks.iter().map(|&t| self.specs[t].output_dim).collect();
        flop_count(self.input_dim(), self.hidden_dim(), &dims, batch)
    }

    /// Sum of the counts of running each task as its own single-head model.
    pub fn single_task_flop_total(&self, batch: usize) -> u64 {
        (0..self.specs.len()).map(|t| self.flop_count(&[t], batch)).sum()
    }
}

pub fn param_count(input_dim: usize, hidden: usize, output_dims: &[usize]) -> usize {
    input_dim * hidden + hidden + output_dims.iter().map(|k| hidden * k + k).sum::<usize>()
}

/// `B * (D*H + sum_k H*K)` multiply-accumulates.
pub fn flop_count(input_dim: usize, hidden: usize, head_dims: &[usize], batch: usize) -> u64 {
    let per_row = (input_dim * hidden) as u64 + head_dims.iter().map(|&k| (hidden * k) as u64).sum::<u64>();
    batch as u64 * per_row
}

/// Calibrated loss weights and scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Derives `(w, s)` from per-task validation losses.
///
/// Classification scales are 1. A regression scale is the power of ten
/// nearest (in log space) to `median_classification_loss / L_regression`.
/// Weights are `median(s_i L_i) / (s_i L_i)` normalized to sum to the task
/// count, which equalizes every weighted loss `w_i s_i L_i`.
pub fn calibrate_weights_scales(losses: &[f64], kinds: &[TaskKind]) -> Result<Calibration> {
    if losses.len() != kinds.len() || losses.is_empty() {
        return Err(Error::invalid("one validation loss per task required"));
    }
    if let Some(l) = losses.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::invalid(format!("validation losses must be positive and finite, got {l}")));
    }
    let class_losses: Vec<f64> = losses
        .iter()
        .zip(kinds)
        .filter(|(_, k)| k.is_classification())
        .map(|(&l, _)| l)
        .collect();
    let reference = (!class_losses.is_empty()).then(|| median(&class_losses));

    let scales: Vec<f64> = losses
        .iter()
        .zip(kinds)
        .map(|(&l, k)| match (k, reference) {
            (TaskKind::Regression, Some(r)) => 10f64.powi((r / l).log10().round() as i32),
            _ => 1.0,
        })
        .collect();
    let scaled: Vec<f64> = losses.iter().zip(&scales).map(|(l, s)| l * s).collect();
    let m = median(&scaled);
    let raw: Vec<f64> = scaled.iter().map(|sl| m / sl).collect();
    let norm = losses.len() as f64 / raw.iter().sum::<f64>();
    Ok(Calibration {
        weights: raw.iter().map(|w| w * norm).collect(),
        scales,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"OMTL";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model as
/// `"OMTL" | u32 version | u64 D | u64 H | u64 n_tasks | u64 K_i... |
/// f32 LE parameters (row-major, gradient-bundle order) | JSON task specs`.
pub fn checkpoint_to_bytes(model: &MultiTaskModel<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4 * model.param_count() + 256);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_dim() as u64).to_le_bytes());
    out.extend_from_slice(&(model.hidden_dim() as u64).to_le_bytes());
    out.extend_from_slice(&(model.specs.len() as u64).to_le_bytes());
    for k in model.output_dims() {
        out.extend_from_slice(&(k as u64).to_le_bytes());
    }
    for v in model.flatten_params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    serde_json::to_writer(&mut out, &model.specs)?;
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(self.pos as u64, format!("truncated while reading {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u64(what)?;
        if v == 0 {
            return Err(Error::format(at, format!("{what} must be >= 1")));
        }
        usize::try_from(v).map_err(|_| Error::format(at, format!("{what} too large")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<MultiTaskModel<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected OMTL"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let d = cur.dim("input dimension")?;
    let h = cur.dim("hidden dimension")?;
    let n = cur.dim("task count")?;
    let ks = (0..n).map(|_| cur.dim("head dimension")).collect::<Result<Vec<_>>>()?;
    let count = d
        .checked_mul(h)
        .and_then(|dh| ks.iter().try_fold(dh + h, |acc, &k| acc.checked_add(h.checked_mul(k)?.checked_add(k)?)))
        .ok_or_else(|| Error::format(cur.pos as u64, "parameter count overflows"))?;
    let payload = cur.take(
        count.checked_mul(4).ok_or_else(|| Error::format(cur.pos as u64, "parameter count overflows"))?,
        "parameters",
    )?;
    let flat: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let trailer_at = cur.pos as u64;
    let specs: Vec<TaskSpec> = serde_json::from_slice(&bytes[cur.pos..])
        .map_err(|e| Error::format(trailer_at, format!("task spec trailer: {e}")))?;
    if specs.len() != n || specs.iter().zip(&ks).any(|(s, &k)| s.output_dim != k) {
        return Err(Error::format(trailer_at, "task specs do not match header dimensions"));
    }
    let mut model = MultiTaskModel::from_parts(
        DenseLayer::zeros(d, h)?,
        ks.iter().map(|&k| DenseLayer::zeros(h, k)).collect::<Result<Vec<_>>>()?,
        specs,
    )
    .map_err(|e| Error::format(trailer_at, e.to_string()))?;
    model.load_flat_params(&flat)?;
    Ok(model)
}

pub fn save_checkpoint(model: &MultiTaskModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultiTaskModel<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

/// Sub-model with the given heads only, sharing a copy of the trunk.
pub fn select_tasks<T: Scalar>(model: &MultiTaskModel<T>, tasks: &[usize]) -> Result<MultiTaskModel<T>> {
    let heads = tasks
        .iter()
        .map(|&t| model.heads.get(t).cloned().ok_or_else(|| Error::invalid(format!("no task {t}"))))
        .collect::<Result<Vec<_>>>()?;
    let specs = tasks.iter().map(|&t| model.specs[t].clone()).collect();
    MultiTaskModel::from_parts(model.shared.clone(), heads, specs)
}

/// Mean absolute residual of `y ~ a*x + b` over a batch; used by tests.
#[cfg(test)]
pub(crate) fn lad_objective(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    xs.iter().zip(ys).map(|(x, y)| (a * x + b - y).abs()).sum::<f64>() / xs.len() as f64
}
