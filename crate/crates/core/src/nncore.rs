//! Dense layer math for a fixed topology: affine layers, rectified activation,
//! the three task loss families with their gradients, momentum SGD and a
//! central-difference gradient checker.
//!
//! Everything is generic over [`Scalar`] so that training can run at `f32`
//! while gradient checks run the same code at `f64`. Matrices are
//! row-major `ndarray` arrays with the batch along axis 0.

use std::fmt::Debug;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, NumAssign};
use rand::Rng;

use crate::{Error, Result};

/// Floating point element type used by layers and losses.
pub trait Scalar:
    Float + NumAssign + LinalgScalar + ScalarOperand + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Affine layer `y = x W^T + b` with weights stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    weights: Array2<T>,
    bias: Array1<T>,
}

/// Gradients of a [`DenseLayer`] for one batch.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Array2<T>, bias: Array1<T>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::dims(format!(
                "weights have {} rows but bias has {} entries",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.is_empty() {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::new(Array2::zeros((out_dim, in_dim)), Array1::zeros(out_dim))
    }

    /// Uniform in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`, zero bias.
    ///
    /// Samples are drawn as `f64` and then cast, so the `f32` and `f64`
    /// layers built from the same stream agree up to rounding.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be >= 1"));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            let u: f64 = rng.random();
            T::of(limit * (2.0 * u - 1.0))
        });
        Self::new(weights, Array1::zeros(out_dim))
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<T> {
        &self.bias
    }

    /// Mutable views onto the parameters. The arrays themselves cannot be
    /// replaced, so layer dimensions stay fixed.
    pub fn params_mut(&mut self) -> [ArrayViewMutD<'_, T>; 2] {
        [self.weights.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }

    pub fn cast<U: Scalar>(&self) -> DenseLayer<U> {
        DenseLayer {
            weights: self.weights.mapv(|v| U::of(v.as_f64())),
            bias: self.bias.mapv(|v| U::of(v.as_f64())),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::dims(format!(
                "input has {} columns, layer expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        Ok(y)
    }

    /// Back-propagates `grad_out = dL/dy` through the layer given the input `x`
    /// that produced `y`.
    pub fn backward(&self, x: ArrayView2<T>, grad_out: ArrayView2<T>) -> Result<LayerGrads<T>> {
        if x.ncols() != self.in_dim() || grad_out.ncols() != self.out_dim() || x.nrows() != grad_out.nrows() {
            return Err(Error::dims(format!(
                "backward: x {:?}, grad {:?}, layer {}x{}",
                x.dim(),
                grad_out.dim(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        let (weights, bias) = self.param_grads(x, grad_out);
        Ok(LayerGrads {
            weights,
            bias,
            input: grad_out.dot(&self.weights),
        })
    }

    /// Weight and bias gradients only; shapes are not re-checked.
    pub(crate) fn param_grads(&self, x: ArrayView2<T>, grad_out: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
        (grad_out.t().dot(&x), grad_out.sum_axis(Axis(0)))
    }
}

/// Convenience wrapper for [`DenseLayer::forward`].
pub fn dense_forward<T: Scalar>(layer: &DenseLayer<T>, x: ArrayView2<T>) -> Result<Array2<T>> {
    layer.forward(x)
}

pub fn relu<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through `relu` given the pre-activation; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(pre: ArrayView2<T>, grad: ArrayView2<T>) -> Array2<T> {
    let mut out = grad.to_owned();
    Zip::from(&mut out).and(&pre).for_each(|g, &p| {
        if p <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Class-weighted softmax cross-entropy, mean over the batch.
///
/// `loss = (1/B) * sum_b cw[t_b] * -log softmax(z_b)[t_b]`
pub fn softmax_xent<T: Scalar>(
    logits: ArrayView2<T>,
    targets: &[usize],
    class_weights: &[T],
) -> Result<(T, Array2<T>)> {
    let (b, k) = logits.dim();
    if b == 0 {
        return Err(Error::invalid("softmax_xent: empty batch"));
    }
    if targets.len() != b {
        return Err(Error::dims(format!("{} targets for batch of {}", targets.len(), b)));
    }
    if class_weights.len() != k {
        return Err(Error::dims(format!("{} class weights for {} classes", class_weights.len(), k)));
    }
    if class_weights.iter().any(|&w| w < T::zero() || !w.is_finite()) {
        return Err(Error::invalid("class weights must be finite and >= 0"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target class {t} out of range for {k} classes")));
    }

    let inv_b = T::one() / T::of(b as f64);
    let mut grad = Array2::zeros((b, k));
    let mut loss = T::zero();
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.fold(T::zero(), |s, &v| s + (v - max).exp());
        let log_sum = sum_exp.ln();
        let lse = max + log_sum;
        let cw = class_weights[t];
        loss += cw * ((max - row[t]) + log_sum);
        let mut grow = grad.row_mut(i);
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let indicator = if j == t { T::one() } else { T::zero() };
            *g = cw * (p - indicator) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

#[inline]
fn stable_sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid binary cross-entropy, mean over all `B*K` entries.
///
/// Per entry: `max(z,0) - z*t + ln(1 + exp(-|z|))`.
pub fn sigmoid_bce<T: Scalar>(logits: ArrayView2<T>, targets: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::dims(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("sigmoid_bce: empty batch"));
    }
    let inv_n = T::one() / T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad).and(&logits).and(&targets).for_each(|g, &z, &t| {
        loss = loss + z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
        *g = (stable_sigmoid(z) - t) * inv_n;
    });
    Ok((loss * inv_n, grad))
}

/// Mean absolute error; the subgradient at a tie is 0.
pub fn mae_loss<T: Scalar>(pred: ArrayView1<T>, target: ArrayView1<T>) -> Result<(T, Array1<T>)> {
    if pred.len() != target.len() {
        return Err(Error::dims(format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mae_loss: empty input"));
    }
    let inv_b = T::one() / T::of(pred.len() as f64);
    let mut loss = T::zero();
    let mut grad = Array1::zeros(pred.len());
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        let d = p - t;
        loss += d.abs();
        *g = if d > T::zero() {
            inv_b
        } else if d < T::zero() {
            -inv_b
        } else {
            T::zero()
        };
    });
    Ok((loss * inv_b, grad))
}

/// One gradient array per trainable parameter array, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T> {
    pub arrays: Vec<ArrayD<T>>,
}

impl<T: Scalar> GradientBundle<T> {
    pub fn flatten(&self) -> Vec<T> {
        self.arrays.iter().flat_map(|a| a.iter().copied()).collect()
    }
}

/// Momentum buffers, created lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentumState<T> {
    velocity: Vec<ArrayD<T>>,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[ArrayD<T>] {
        &self.velocity
    }
}

/// Classical momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
///
/// `lr = 0` leaves the parameters untouched (bit for bit) while still
/// accumulating velocity.
pub fn optimizer_step<T: Scalar>(
    params: &mut [ArrayViewMutD<'_, T>],
    grads: &GradientBundle<T>,
    state: &mut MomentumState<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    if !(lr >= T::zero()) || !lr.is_finite() {
        return Err(Error::invalid("learning rate must be finite and >= 0"));
    }
    if !(momentum >= T::zero() && momentum < T::one()) {
        return Err(Error::invalid("momentum must lie in [0, 1)"));
    }
    if params.len() != grads.arrays.len() {
        return Err(Error::dims(format!(
            "{} parameter arrays vs {} gradient arrays",
            params.len(),
            grads.arrays.len()
        )));
    }
    for (p, g) in params.iter().zip(&grads.arrays) {
        if p.shape() != g.shape() {
            return Err(Error::dims(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = grads.arrays.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
    } else if state.velocity.len() != grads.arrays.len()
        || state.velocity.iter().zip(&grads.arrays).any(|(v, g)| v.shape() != g.shape())
    {
        return Err(Error::dims("optimizer state does not match parameter shapes"));
    }

    for ((p, g), v) in params.iter_mut().zip(&grads.arrays).zip(&mut state.velocity) {
        Zip::from(&mut *v).and(g).for_each(|v, &g| *v = momentum * *v + g);
        if lr == T::zero() {
            continue;
        }
        Zip::from(p.view_mut()).and(&*v).for_each(|p, &v| *p -= lr * v);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("optimizer step".into()));
        }
    }
    Ok(())
}

/// Compares an analytic gradient with central finite differences.
///
/// `loss_and_grad` maps a flat parameter vector to `(loss, gradient)`. Returns
/// the maximum over coordinates of
/// `|g_a - g_n| / max(1e-12, |g_a| + |g_n|)`.
pub fn grad_check<F>(mut loss_and_grad: F, params: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameter count");
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let (plus, _) = loss_and_grad(&probe);
        probe[i] = params[i] - epsilon;
        let (minus, _) = loss_and_grad(&probe);
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-12);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
