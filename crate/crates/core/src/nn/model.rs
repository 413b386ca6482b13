use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::arch::{Architecture, Op, Plan};
use crate::numerics::{RngState, Tensor};
use crate::scalar::Scalar;

/// Layer-gradient list, ordered like [`ModelState::layers`].
pub type Grads<T> = Vec<Tensor<T>>;

/// Network parameters plus the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    arch: Architecture,
    layers: Vec<(String, Tensor<T>)>,
    plan: Plan,
}

/// A lot of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `S x input_dim`.
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (s, _) = inputs.dims2()?;
        if s == 0 {
            return Err(Error::validation("batch must hold at least one example"));
        }
        if s != labels.len() {
            return Err(Error::shape(format!("{s} inputs but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelRange { label, num_classes });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-example gradients of the cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads<T> {
    pub per_example: Vec<Grads<T>>,
    pub loss_values: Vec<T>,
}

/// Activations retained from a forward pass for the backward pass.
struct Trace<T> {
    /// Input to each op.
    inputs: Vec<Vec<T>>,
    /// Flat argmax positions for each max-pool op, indexed like `inputs`.
    pool_argmax: Vec<Vec<usize>>,
}

impl<T: Scalar> ModelState<T> {
    /// Builds a model from explicit parameters, checking shapes against `arch`.
    pub fn from_layers(arch: Architecture, layers: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let plan = arch.plan()?;
        if layers.len() != plan.params.len() {
            return Err(Error::shape(format!(
                "architecture has {} parameter tensors, got {}",
                plan.params.len(),
                layers.len()
            )));
        }
        for (spec, (_, t)) in plan.params.iter().zip(&layers) {
            if spec.shape != t.shape() {
                return Err(Error::shape(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::validation(format!("{} has non-finite parameters", spec.name)));
            }
        }
        Ok(ModelState { arch, layers, plan })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[(String, Tensor<T>)] {
        &self.layers
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn zeros_like(&self) -> Grads<T> {
        self.layers.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    /// All parameters concatenated in layer order.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    pub fn with_layers(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .zip(tensors)
            .map(|((name, _), t)| (name.clone(), t))
            .collect();
        ModelState::from_layers(self.arch.clone(), layers)
    }

    pub fn check_grads(&self, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "gradient list has {} tensors, model has {}",
                grads.len(),
                self.layers.len()
            )));
        }
        for ((name, p), g) in self.layers.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "{name}: gradient shape {:?} vs parameter shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// In-place `θ ← θ − η g`.
    pub fn apply_update(&mut self, grads: &[Tensor<T>], eta: T) -> Result<()> {
        self.check_grads(grads)?;
        for ((_, p), g) in self.layers.iter_mut().zip(grads) {
            p.axpy(-eta, g)?;
        }
        for (name, p) in &self.layers {
            p.ensure_finite(name)?;
        }
        Ok(())
    }

    fn forward_one(&self, x: &[T], keep_trace: bool) -> (Vec<T>, Option<Trace<T>>) {
        let mut cur = x.to_vec();
        let mut trace = keep_trace.then(|| Trace {
            inputs: Vec::with_capacity(self.plan.ops.len()),
            pool_argmax: Vec::with_capacity(self.plan.ops.len()),
        });
        for op in &self.plan.ops {
            let mut argmax = Vec::new();
            let next = match *op {
                Op::Dense { inputs, outputs, param } => {
                    let w = self.layers[param].1.data();
                    let b = self.layers[param + 1].1.data();
                    (0..outputs)
                        .map(|o| {
                            let row = &w[o * inputs..(o + 1) * inputs];
                            b[o] + row.iter().zip(&cur).map(|(&a, &c)| a * c).sum::<T>()
                        })
                        .collect()
                }
                Op::Conv {
                    in_channels,
                    height,
                    width,
                    filters,
                    kernel,
                    param,
                } => conv_forward(
                    &cur,
                    self.layers[param].1.data(),
                    self.layers[param + 1].1.data(),
                    in_channels,
                    height,
                    width,
                    filters,
                    kernel,
                ),
                Op::Relu => cur.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
                Op::MaxPool {
                    channels,
                    height,
                    width,
                    size,
                } => {
                    let (out, idx) = maxpool_forward(&cur, channels, height, width, size);
                    argmax = idx;
                    out
                }
            };
            if let Some(tr) = trace.as_mut() {
                tr.inputs.push(std::mem::replace(&mut cur, next));
                tr.pool_argmax.push(argmax);
            } else {
                cur = next;
            }
        }
        (cur, trace)
    }

    /// Logits for every row of `inputs` (`S x input_dim`).
    pub fn forward(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, d) = inputs.dims2()?;
        if d != self.plan.input_len {
            return Err(Error::shape(format!(
                "input dimension {d} does not match architecture input {}",
                self.plan.input_len
            )));
        }
        let c = self.arch.num_classes;
        let rows: Vec<Vec<T>> = (0..s)
            .into_par_iter()
            .map(|i| self.forward_one(inputs.row(i), false).0)
            .collect();
        Tensor::new(vec![s, c], rows.concat())
    }

    /// Loss and parameter gradient for a single example.
    pub fn example_grad(&self, x: &[T], label: usize) -> (T, Grads<T>) {
        let (logits, trace) = self.forward_one(x, true);
        let trace = trace.expect("trace requested");
        let (loss, mut delta) = softmax_cross_entropy(&logits, label);
        let mut grads = self.zeros_like();
        for (pos, op) in self.plan.ops.iter().enumerate().rev() {
            let input = &trace.inputs[pos];
            delta = match *op {
                Op::Dense { inputs, outputs, param } => {
                    let w = self.layers[param].1.data();
                    {
                        let gw = grads[param].data_mut();
                        for o in 0..outputs {
                            let d = delta[o];
                            if d == T::zero() {
                                continue;
                            }
                            for (g, &xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(input) {
                                *g += d * xi;
                            }
                        }
                    }
                    grads[param + 1].data_mut().copy_from_slice(&delta);
                    if pos == 0 {
                        Vec::new()
                    } else {
                        let mut dx = vec![T::zero(); inputs];
                        for o in 0..outputs {
                            let d = delta[o];
                            if d == T::zero() {
                                continue;
                            }
                            for (g, &wi) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                                *g += d * wi;
                            }
                        }
                        dx
                    }
                }
                Op::Conv {
                    in_channels,
                    height,
                    width,
                    filters,
                    kernel,
                    param,
                } => {
                    let (gw, rest) = grads.split_at_mut(param + 1);
                    conv_backward(
                        input,
                        &delta,
                        self.layers[param].1.data(),
                        gw[param].data_mut(),
                        rest[0].data_mut(),
                        in_channels,
                        height,
                        width,
                        filters,
                        kernel,
                        pos != 0,
                    )
                }
                Op::Relu => input
                    .iter()
                    .zip(&delta)
                    .map(|(&xi, &d)| if xi > T::zero() { d } else { T::zero() })
                    .collect(),
                Op::MaxPool { .. } => {
                    let mut dx = vec![T::zero(); input.len()];
                    for (&src, &d) in trace.pool_argmax[pos].iter().zip(&delta) {
                        dx[src] += d;
                    }
                    dx
                }
            };
        }
        (loss, grads)
    }

    /// Per-example gradients; entry `i` depends only on example `i`.
    pub fn per_example_backward(&self, batch: &Batch<T>) -> Result<PerExampleGrads<T>> {
        let (s, d) = batch.inputs.dims2()?;
        if d != self.plan.input_len {
            return Err(Error::shape(format!(
                "input dimension {d} does not match architecture input {}",
                self.plan.input_len
            )));
        }
        if s != batch.labels.len() {
            return Err(Error::shape("batch inputs and labels differ in length"));
        }
        if let Some(&label) = batch.labels.iter().find(|&&l| l >= self.arch.num_classes) {
            return Err(Error::LabelRange {
                label,
                num_classes: self.arch.num_classes,
            });
        }
        let results: Vec<(T, Grads<T>)> = (0..s)
            .into_par_iter()
            .map(|i| self.example_grad(batch.inputs.row(i), batch.labels[i]))
            .collect();
        let (loss_values, per_example) = results.into_iter().unzip();
        Ok(PerExampleGrads {
            per_example,
            loss_values,
        })
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, batch: &Batch<T>) -> Result<T> {
        let logits = self.forward(&batch.inputs)?;
        let total: T = batch
            .labels
            .iter()
            .enumerate()
            .map(|(i, &y)| softmax_cross_entropy(logits.row(i), y).0)
            .sum();
        Ok(total / T::of(batch.len() as f64))
    }
}

/// Draws parameters uniformly from `±1/sqrt(fan_in)`, layer by layer.
pub fn init_model<T: Scalar>(arch: &Architecture, rng: &mut RngState) -> Result<ModelState<T>> {
    let plan = arch.plan()?;
    let layers = plan
        .params
        .iter()
        .map(|spec| {
            let bound = 1.0 / (spec.fan_in as f64).sqrt();
            let t = Tensor::from_fn(&spec.shape, |_| T::of(bound * (2.0 * rng.uniform() - 1.0)));
            (spec.name.clone(), t)
        })
        .collect();
    ModelState::from_layers(arch.clone(), layers)
}

pub fn forward<T: Scalar>(model: &ModelState<T>, inputs: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(inputs)
}

pub fn per_example_backward<T: Scalar>(model: &ModelState<T>, batch: &Batch<T>) -> Result<PerExampleGrads<T>> {
    model.per_example_backward(batch)
}

/// `θ' = θ − η g` as a new model.
pub fn sgd_step<T: Scalar>(model: &ModelState<T>, grads: &[Tensor<T>], eta: T) -> Result<ModelState<T>> {
    let mut next = model.clone();
    next.apply_update(grads, eta)?;
    Ok(next)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    const CHUNK: usize = 1024;
    let mut correct = 0usize;
    for start in (0..dataset.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(dataset.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = dataset.batch(&idx)?;
        let logits = model.forward(&batch.inputs)?;
        correct += batch
            .labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| argmax(logits.row(i)) == y)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Loss and `d loss / d logits` for softmax cross-entropy.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label];
    let mut grad: Vec<T> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= T::one();
    (loss, grad)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
) -> Vec<T> {
    let oh = height - kernel + 1;
    let ow = width - kernel + 1;
    let mut out = vec![T::zero(); filters * oh * ow];
    for f in 0..filters {
        let plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b[f]);
        for c in 0..channels {
            for u in 0..kernel {
                for v in 0..kernel {
                    let wv = w[((f * channels + c) * kernel + u) * kernel + v];
                    if wv == T::zero() {
                        continue;
                    }
                    for i in 0..oh {
                        let src = &x[(c * height + i + u) * width + v..][..ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    w: &[T],
    gw: &mut [T],
    gb: &mut [T],
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kernel: usize,
    need_dx: bool,
) -> Vec<T> {
    let oh = height - kernel + 1;
    let ow = width - kernel + 1;
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    for f in 0..filters {
        let plane = &dout[f * oh * ow..(f + 1) * oh * ow];
        gb[f] += plane.iter().copied().sum::<T>();
        for c in 0..channels {
            for u in 0..kernel {
                for v in 0..kernel {
                    let widx = ((f * channels + c) * kernel + u) * kernel + v;
                    let mut acc = T::zero();
                    for i in 0..oh {
                        let src = &x[(c * height + i + u) * width + v..][..ow];
                        let d = &plane[i * ow..(i + 1) * ow];
                        acc += src.iter().zip(d).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    gw[widx] += acc;
                    if need_dx {
                        let wv = w[widx];
                        for i in 0..oh {
                            let dst = &mut dx[(c * height + i + u) * width + v..][..ow];
                            let d = &plane[i * ow..(i + 1) * ow];
                            for (t, &g) in dst.iter_mut().zip(d) {
                                *t += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(
    x: &[T],
    channels: usize,
    height: usize,
    width: usize,
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = height / size;
    let ow = width / size;
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut idx = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (c * height + i * size) * width + j * size;
                for u in 0..size {
                    for v in 0..size {
                        let p = (c * height + i * size + u) * width + j * size + v;
                        // Strict comparison: first maximal element wins ties.
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
