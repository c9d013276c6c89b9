//! Minimal convolutional network engine: forward pass with a retained trace,
//! reverse-mode gradients (standard or guided rectifier rule) and SGD with
//! momentum. Generic over the element type.

pub mod ops;
mod sgd;

use std::ops::Range;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis, Dimension, Zip};
use ndarray::linalg::general_mat_mul;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

pub use sgd::Sgd;

/// 3x3, stride 1, one pixel of zero padding; optional fused rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (out_channels, in_channels·9), taps ordered (channel, ky, kx).
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub relu: bool,
}

/// Fully connected layer `y = x·Wᵀ + b`; optional fused rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// (out_features, in_features)
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    Conv(Conv3x3<T>),
    MaxPool,
    Flatten,
    Dense(Dense<T>),
    Dropout { rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn params(&self) -> Option<(&Array2<T>, &Array1<T>)> {
        match &self.kind {
            LayerKind::Conv(c) => Some((&c.weight, &c.bias)),
            LayerKind::Dense(d) => Some((&d.weight, &d.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Array2<T>, &mut Array1<T>)> {
        match &mut self.kind {
            LayerKind::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            LayerKind::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            _ => None,
        }
    }

    fn has_relu(&self) -> bool {
        match &self.kind {
            LayerKind::Conv(c) => c.relu,
            LayerKind::Dense(d) => d.relu,
            _ => false,
        }
    }
}

/// Rectifier backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReluRule {
    /// Pass gradient where the forward activation is positive.
    Standard,
    /// Additionally drop negative incoming gradients.
    Guided,
}

/// Forward-pass mode. Dropout is active only in training.
pub enum Mode<'a, R: Rng> {
    Eval,
    Train(&'a mut R),
}

/// Activations retained by a forward pass. `acts[i]` is the input of layer
/// `range.start + i`; the last entry is the output of the final layer run.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub range: Range<usize>,
    pub acts: Vec<Array4<T>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    dropout_masks: Vec<Option<Array4<T>>>,
}

impl<T: Scalar> Trace<T> {
    /// Output of layer `layer` (absolute index).
    pub fn output_of(&self, layer: usize) -> &Array4<T> {
        &self.acts[layer + 1 - self.range.start]
    }

    pub fn output(&self) -> &Array4<T> {
        self.acts.last().expect("trace holds at least the input")
    }

    /// Final output flattened to (N, features).
    pub fn logits(&self) -> Array2<T> {
        flat2(self.output())
    }
}

/// Per-layer parameter gradients aligned with `Network::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<(Array2<T>, Array1<T>)>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| l.params().map(|(w, b)| (Array2::zeros(w.raw_dim()), Array1::zeros(b.raw_dim()))))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct BackwardOptions {
    pub rule: ReluRule,
    /// Propagate down to the input of this layer (absolute index).
    pub stop_at: usize,
    /// Skip the input gradient of the lowest layer when only parameter
    /// gradients are wanted.
    pub need_input_grad: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            rule: ReluRule::Standard,
            stop_at: 0,
            need_input_grad: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
}

fn flat2<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let n = x.shape()[0];
    let f = x.len() / n.max(1);
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((n, f))
        .expect("contiguous reshape")
}

fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

impl<T: Scalar> Network<T> {
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Runs every layer, retaining the trace needed for backpropagation.
    pub fn forward<R: Rng>(&self, input: Array4<T>, mode: Mode<'_, R>) -> Trace<T> {
        self.forward_range(input, 0..self.layers.len(), mode)
    }

    /// Runs layers `range` on an activation that is the input of `range.start`.
    pub fn forward_range<R: Rng>(&self, input: Array4<T>, range: Range<usize>, mut mode: Mode<'_, R>) -> Trace<T> {
        let mut acts = Vec::with_capacity(range.len() + 1);
        let mut pool_argmax = Vec::with_capacity(range.len());
        let mut dropout_masks = Vec::with_capacity(range.len());
        acts.push(input);
        for layer in &self.layers[range.clone()] {
            let x = acts.last().expect("non-empty");
            let mut argmax = None;
            let mut mask = None;
            let y = match &layer.kind {
                LayerKind::Conv(conv) => conv_forward(conv, x),
                LayerKind::MaxPool => {
                    let (y, idx) = pool_forward(x);
                    argmax = Some(idx);
                    y
                }
                LayerKind::Flatten => {
                    let f = flat2(x);
                    let (n, d) = f.dim();
                    f.into_shape_with_order((n, d, 1, 1)).expect("reshape")
                }
                LayerKind::Dense(dense) => dense_forward(dense, x),
                LayerKind::Dropout { rate } => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let scale = T::of(1.0 / keep);
                        let m = Array4::from_shape_simple_fn(x.raw_dim(), || {
                            if rng.random::<f64>() < keep {
                                scale
                            } else {
                                T::zero()
                            }
                        });
                        let y = x * &m;
                        mask = Some(m);
                        y
                    }
                    _ => x.clone(),
                },
            };
            pool_argmax.push(argmax);
            dropout_masks.push(mask);
            acts.push(y);
        }
        Trace {
            range,
            acts,
            pool_argmax,
            dropout_masks,
        }
    }

    /// Evaluation-mode class scores (pre-softmax), shape (N, classes).
    pub fn logits(&self, input: &Array4<T>) -> Array2<T> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match &layer.kind {
                LayerKind::Conv(conv) => conv_forward(conv, &x),
                LayerKind::MaxPool => pool_forward(&x).0,
                LayerKind::Flatten => {
                    let f = flat2(&x);
                    let (n, d) = f.dim();
                    f.into_shape_with_order((n, d, 1, 1)).expect("reshape")
                }
                LayerKind::Dense(dense) => dense_forward(dense, &x),
                LayerKind::Dropout { .. } => x,
            };
            debug_assert!(i < self.layers.len());
        }
        flat2(&x)
    }

    /// Reverse pass from `grad_out` (gradient w.r.t. the trace's final output,
    /// shaped like it or as (N, features)) down to the input of
    /// `opts.stop_at`. Parameter gradients are accumulated into `grads` when given.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: Array4<T>,
        opts: &BackwardOptions,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        assert!(
            opts.stop_at >= trace.range.start && opts.stop_at <= trace.range.end,
            "stop_at outside the traced range"
        );
        let mut g = grad_out;
        for li in (opts.stop_at..trace.range.end).rev() {
            let local = li - trace.range.start;
            let layer = &self.layers[li];
            let x = &trace.acts[local];
            let y = &trace.acts[local + 1];
            if layer.has_relu() {
                match opts.rule {
                    ReluRule::Standard => Zip::from(&mut g).and(y).for_each(|g, &y| {
                        if y <= T::zero() {
                            *g = T::zero();
                        }
                    }),
                    ReluRule::Guided => Zip::from(&mut g).and(y).for_each(|g, &y| {
                        if y <= T::zero() || *g < T::zero() {
                            *g = T::zero();
                        }
                    }),
                }
            }
            let want_input = li > opts.stop_at || opts.need_input_grad;
            let layer_grads = grads.as_deref_mut().and_then(|gr| gr.layers[li].as_mut());
            g = match &layer.kind {
                LayerKind::Conv(conv) => conv_backward(conv, x, &g, layer_grads, want_input),
                LayerKind::Dense(dense) => dense_backward(dense, x, &g, layer_grads, want_input),
                LayerKind::MaxPool => {
                    let idx = trace.pool_argmax[local].as_ref().expect("pool trace");
                    pool_backward(x.raw_dim(), &g, idx)
                }
                LayerKind::Flatten => g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(x.raw_dim())
                    .expect("reshape"),
                LayerKind::Dropout { .. } => match &trace.dropout_masks[local] {
                    Some(m) => g * m,
                    None => g,
                },
            };
        }
        g
    }

    pub fn zero_tail(&mut self, class: usize) {
        if let Some(Layer {
            kind: LayerKind::Dense(d),
            ..
        }) = self.layers.last_mut()
        {
            d.weight.row_mut(class).fill(T::zero());
            d.bias[class] = T::zero();
        }
    }
}

fn conv_forward<T: Scalar>(conv: &Conv3x3<T>, x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, conv.in_channels, "conv input channels");
    let mut y = Array4::<T>::zeros((n, conv.out_channels, h, w));
    let mut col = Array2::<T>::zeros((c * 9, h * w));
    for i in 0..n {
        ops::im2col(x.index_axis(Axis(0), i), &mut col);
        let mut out = y
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((conv.out_channels, h * w))
            .expect("contiguous");
        out.assign(&conv.bias.view().insert_axis(Axis(1)).broadcast((conv.out_channels, h * w)).expect("broadcast"));
        general_mat_mul(T::one(), &conv.weight, &col, T::one(), &mut out);
    }
    if conv.relu {
        relu_inplace(&mut y);
    }
    y
}

fn conv_backward<T: Scalar>(
    conv: &Conv3x3<T>,
    x: &Array4<T>,
    g: &Array4<T>,
    grads: Option<&mut (Array2<T>, Array1<T>)>,
    want_input: bool,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut col = Array2::<T>::zeros((c * 9, h * w));
    let mut dx = Array4::<T>::zeros(if want_input { (n, c, h, w) } else { (0, c, h, w) });
    let mut dcol = Array2::<T>::zeros(if want_input { (c * 9, h * w) } else { (0, 0) });
    let g = g.as_standard_layout();
    let mut grads = grads;
    for i in 0..n {
        let gi = g
            .index_axis(Axis(0), i)
            .into_shape_with_order((conv.out_channels, h * w))
            .expect("contiguous");
        if let Some((dw, db)) = grads.as_deref_mut() {
            ops::im2col(x.index_axis(Axis(0), i), &mut col);
            general_mat_mul(T::one(), &gi, &col.t(), T::one(), dw);
            *db += &gi.sum_axis(Axis(1));
        }
        if want_input {
            general_mat_mul(T::one(), &conv.weight.t(), &gi, T::zero(), &mut dcol);
            ops::col2im(&dcol, dx.index_axis_mut(Axis(0), i));
        }
    }
    dx
}

fn dense_forward<T: Scalar>(dense: &Dense<T>, x: &Array4<T>) -> Array4<T> {
    let x2 = flat2(x);
    let mut y = x2.dot(&dense.weight.t()) + &dense.bias;
    if dense.relu {
        y.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    }
    let (n, d) = y.dim();
    y.into_shape_with_order((n, d, 1, 1)).expect("reshape")
}

fn dense_backward<T: Scalar>(
    dense: &Dense<T>,
    x: &Array4<T>,
    g: &Array4<T>,
    grads: Option<&mut (Array2<T>, Array1<T>)>,
    want_input: bool,
) -> Array4<T> {
    let g2 = flat2(g);
    if let Some((dw, db)) = grads {
        let x2 = flat2(x);
        general_mat_mul(T::one(), &g2.t(), &x2, T::one(), dw);
        *db += &g2.sum_axis(Axis(0));
    }
    if !want_input {
        return Array4::zeros((0, 1, 1, 1));
    }
    let dx: Array2<T> = g2.dot(&dense.weight);
    dx.into_shape_with_order(x.raw_dim()).expect("reshape")
}

fn pool_forward<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((n, c, oh, ow));
    let per = c * oh * ow;
    let mut idx = vec![0u32; n * per];
    for i in 0..n {
        ops::max_pool2(
            x.index_axis(Axis(0), i),
            y.index_axis_mut(Axis(0), i),
            &mut idx[i * per..(i + 1) * per],
        );
    }
    (y, idx)
}

fn pool_backward<T: Scalar>(input_dim: ndarray::Ix4, g: &Array4<T>, idx: &[u32]) -> Array4<T> {
    let (n, c, h, w) = input_dim.into_pattern();
    let (_, _, oh, ow) = g.dim();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * oh * ow;
            let mut plane = dx.slice_mut(s![i, ch, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = idx[base + oy * ow + ox] as usize;
                    plane[[flat / w, flat % w]] += g[[i, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Row-wise softmax.
pub fn softmax<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T>(logits: ArrayView2<T>, targets: &[usize]) -> (f64, Array2<T>)
where
    T: Scalar,
{
    let probs = softmax(logits);
    let n = targets.len();
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        let p = probs[[i, t]].as_f64().max(f64::MIN_POSITIVE);
        loss -= p.ln();
        grad[[i, t]] -= T::one();
    }
    grad.mapv_inplace(|v| v / T::of(n as f64));
    (loss / n as f64, grad)
}

/// Weight initializers.
pub fn he_normal<T: Scalar, R: Rng>(rows: usize, fan_in: usize, rng: &mut R) -> Array2<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    gaussian((rows, fan_in), std, rng)
}

pub fn gaussian<T: Scalar, R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || T::of(dist.sample(rng)))
}

/// Stacks (3, S, S) inputs into an (N, 3, S, S) batch.
pub fn stack_inputs<T: Scalar>(items: &[&Array3<T>]) -> Array4<T> {
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal input shapes")
}
