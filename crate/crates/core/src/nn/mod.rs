//! Dense feedforward classifier with manual forward and backward passes.
//!
//! Parameters live in one flat `f64` vector ([`ModelParams`]) so that the
//! federation layer can average them without knowing the architecture.

mod arch;
pub mod group_norm;
mod optim;

use rand::distr::{Distribution, Uniform};

pub use arch::{ArchDescriptor, LayerLayout, Norm};
pub use optim::{sgd_step, sgd_step_in_place, OptimizerState, StepSchedule};

use crate::rng::{self, tag};
use crate::{Error, Matrix, Result};
use group_norm::GroupNormCache;

/// Flat parameter vector plus the architecture that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: ArchDescriptor,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ArchDescriptor, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "architecture needs {expected} parameters, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("parameter {i} is not finite")));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        let n = arch.param_count();
        Self::new(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bitwise equality of values and architecture (distinguishes `-0.0`).
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// A mini-batch. `ids` are the stable example identifiers used by
/// table-backed teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Batch {
    /// Batch whose ids are the row positions `0..n`.
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        Self::with_ids(inputs, labels, ids)
    }

    pub fn with_ids(inputs: Matrix, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Validation("batch must hold at least one example".into()));
        }
        if inputs.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Shape(format!(
                "batch has {} input rows, {} labels and {} ids",
                inputs.rows(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Uniform `±sqrt(6 / (fan_in + fan_out))` weights; zero biases and norm
/// shifts; unit norm scales.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = rng::stream(&[tag::INIT, seed]);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layout() {
        let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit)
            .map_err(|e| Error::InvalidArch(e.to_string()))?;
        for w in &mut values[layer.weight..layer.bias] {
            *w = dist.sample(&mut rng);
        }
        if let Some((scale, shift, _)) = layer.norm {
            values[scale..shift].fill(1.0);
        }
    }
    ModelParams::new(arch.clone(), values)
}

/// Intermediate values of a forward pass, consumed by [`backward_with_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[l]` is the input to layer `l`; index 0 is the batch input.
    activations: Vec<Matrix>,
    norms: Vec<Option<GroupNormCache>>,
    logits: Matrix,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }
}

fn check_inputs(params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.arch.input_dim {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            inputs.cols(),
            params.arch.input_dim
        )));
    }
    Ok(())
}

fn linear(params: &[f64], layer: &LayerLayout, x: &Matrix) -> Matrix {
    let w = &params[layer.weight..layer.bias];
    let b = &params[layer.bias..layer.bias + layer.out_dim];
    let mut out = Matrix::zeros(x.rows(), layer.out_dim);
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (o, y) in out.row_mut(r).iter_mut().enumerate() {
            let wr = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
            *y = b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    out
}

pub fn forward_with_trace(params: &ModelParams, inputs: &Matrix) -> Result<ForwardTrace> {
    check_inputs(params, inputs)?;
    let layout = params.arch.layout();
    let (hidden, output) = layout.split_at(layout.len() - 1);
    let mut activations = Vec::with_capacity(layout.len());
    let mut norms = Vec::with_capacity(hidden.len());
    activations.push(inputs.clone());
    for layer in hidden {
        let z = linear(&params.values, layer, activations.last().unwrap());
        let (mut y, cache) = match layer.norm {
            Some((scale, shift, groups)) => {
                let (y, cache) = group_norm::forward(
                    &z,
                    &params.values[scale..shift],
                    &params.values[shift..shift + layer.out_dim],
                    groups,
                );
                (y, Some(cache))
            }
            None => (z, None),
        };
        for v in y.as_mut_slice() {
            *v = v.max(0.0);
        }
        norms.push(cache);
        activations.push(y);
    }
    let logits = linear(&params.values, &output[0], activations.last().unwrap());
    if !logits.is_finite() {
        return Err(Error::Diverged("forward pass produced non-finite logits".into()));
    }
    Ok(ForwardTrace {
        activations,
        norms,
        logits,
    })
}

/// Logits for every row of `batch`, shape `batch_size x num_classes`.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Matrix> {
    forward_inputs(params, &batch.inputs)
}

pub fn forward_inputs(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    forward_with_trace(params, inputs).map(ForwardTrace::into_logits)
}

/// Gradient w.r.t. every parameter of `sum(logits * upstream)`.
pub fn backward(params: &ModelParams, batch: &Batch, upstream: &Matrix) -> Result<Vec<f64>> {
    let trace = forward_with_trace(params, &batch.inputs)?;
    backward_with_trace(params, &trace, upstream)
}

pub fn backward_with_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    upstream: &Matrix,
) -> Result<Vec<f64>> {
    if upstream.shape() != trace.logits.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?}, logits are {:?}",
            upstream.shape(),
            trace.logits.shape()
        )));
    }
    let values = &params.values;
    let layout = params.arch.layout();
    let mut grads = vec![0.0; values.len()];
    let mut delta = upstream.clone();

    for (l, layer) in layout.iter().enumerate().rev() {
        if l + 1 < layout.len() {
            // delta is d/d(relu output); mask by the active units
            let act = &trace.activations[l + 1];
            for (d, a) in delta.as_mut_slice().iter_mut().zip(act.as_slice()) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            if let (Some((scale, shift, groups)), Some(cache)) = (layer.norm, &trace.norms[l]) {
                let (head, tail) = grads.split_at_mut(shift);
                delta = group_norm::backward(
                    &delta,
                    cache,
                    &values[scale..shift],
                    groups,
                    &mut head[scale..shift],
                    &mut tail[..layer.out_dim],
                );
            }
        }
        let input = &trace.activations[l];
        let w = &values[layer.weight..layer.bias];
        {
            let (gw, gb) = grads[layer.weight..layer.bias + layer.out_dim]
                .split_at_mut(layer.out_dim * layer.in_dim);
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let xr = input.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, x) in gw[o * layer.in_dim..(o + 1) * layer.in_dim]
                        .iter_mut()
                        .zip(xr)
                    {
                        *g += d * x;
                    }
                }
            }
        }
        if l > 0 {
            let mut prev = Matrix::zeros(delta.rows(), layer.in_dim);
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                let out = prev.row_mut(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in out.iter_mut().zip(&w[o * layer.in_dim..(o + 1) * layer.in_dim]) {
                        *p += d * wv;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(params: &ModelParams, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation("accuracy of an empty set is undefined".into()));
    }
    if inputs.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} input rows for {} labels",
            inputs.rows(),
            labels.len()
        )));
    }
    let logits = forward_inputs(params, inputs)?;
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
