//! Encoder/classifier network `h = g(f(x))` with hand-written backprop.
//!
//! The encoder `f` is two linear layers with a rectifier between them; its
//! output (the embedding) is left linear. The head `g` is one linear layer
//! producing logits.
//!
//! All parameters live in one flat vector, in this order:
//!
//! | tensor | shape                 |
//! |--------|-----------------------|
//! | `w1`   | `hidden × input`      |
//! | `b1`   | `hidden`              |
//! | `w2`   | `embed × hidden`      |
//! | `b2`   | `embed`               |
//! | `w3`   | `classes × embed`     |
//! | `b3`   | `classes`             |
//!
//! Weight matrices are row-major, one row per output unit. `flatten`
//! returns exactly this vector.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::linalg::{dot, RealMatrix};
use crate::math::{exp, ln, sqrt};

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
}

impl MlpDims {
    pub fn new(input: usize, hidden: usize, embed: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            embed,
            classes,
        }
    }

    /// The three linear layers, input to output.
    pub fn layers(&self) -> [LayerShape; 3] {
        let l1 = LayerShape {
            inputs: self.input,
            outputs: self.hidden,
            weight_offset: 0,
        };
        let l2 = LayerShape {
            inputs: self.hidden,
            outputs: self.embed,
            weight_offset: l1.end(),
        };
        let l3 = LayerShape {
            inputs: self.embed,
            outputs: self.classes,
            weight_offset: l2.end(),
        };
        [l1, l2, l3]
    }

    pub fn param_count(&self) -> usize {
        self.layers()[2].end()
    }

    fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.embed == 0 || self.classes == 0 {
            return Err(invalid("dims", "every layer width must be positive"));
        }
        Ok(())
    }
}

/// Location of one linear layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub weight_offset: usize,
}

impl LayerShape {
    pub fn weights(&self) -> Range<usize> {
        self.weight_offset..self.weight_offset + self.inputs * self.outputs
    }

    pub fn bias(&self) -> Range<usize> {
        let start = self.weights().end;
        start..start + self.outputs
    }

    fn end(&self) -> usize {
        self.bias().end
    }

    /// Flat indices of output row `o` in the bias-augmented view
    /// `[w[o, ..], b[o]]`.
    pub fn augmented_row(&self, o: usize) -> impl Iterator<Item = usize> {
        let w = self.weight_offset + o * self.inputs;
        (w..w + self.inputs).chain(core::iter::once(self.bias().start + o))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    dims: MlpDims,
    params: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every parameter, laid out
/// like [`MlpClassifier::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    dims: MlpDims,
    values: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Rectified hidden activations, `n × hidden`.
    pub hidden: RealMatrix,
    /// Encoder output `f(x)`, `n × embed`.
    pub embeddings: RealMatrix,
    /// `g(f(x))`, `n × classes`.
    pub logits: RealMatrix,
}

impl MlpClassifier {
    /// Uniform Glorot initialization, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: MlpDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut params = vec![0.0; dims.param_count()];
        for layer in dims.layers() {
            let limit = sqrt(6.0 / (layer.inputs + layer.outputs) as f64);
            for w in &mut params[layer.weights()] {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(Self { dims, params })
    }

    pub fn zeros(dims: MlpDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            params: vec![0.0; dims.param_count()],
        })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    /// A model of the same shape carrying the parameters `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        Self::from_flat(self.dims, flat.to_vec())
    }

    pub fn from_flat(dims: MlpDims, flat: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        ensure_dim("unflatten", dims.param_count(), flat.len())?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self { dims, params: flat })
    }

    /// Embedding and logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        ensure_dim("forward input", self.dims.input, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input"));
        }
        let [l1, l2, l3] = self.dims.layers();
        let mut hidden = vec![0.0; l1.outputs];
        self.linear(l1, x, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let mut embedding = vec![0.0; l2.outputs];
        self.linear(l2, &hidden, &mut embedding);
        let mut logits = vec![0.0; l3.outputs];
        self.linear(l3, &embedding, &mut logits);
        Ok((embedding, logits))
    }

    /// Row-wise forward pass over a batch.
    pub fn forward_batch(&self, xs: &RealMatrix) -> Result<ForwardPass> {
        ensure_dim("forward input", self.dims.input, xs.cols())?;
        if !xs.is_finite() {
            return Err(Error::NonFinite("forward input"));
        }
        let [l1, l2, l3] = self.dims.layers();
        let n = xs.rows();
        let mut hidden = RealMatrix::zeros(n, l1.outputs);
        let mut embeddings = RealMatrix::zeros(n, l2.outputs);
        let mut logits = RealMatrix::zeros(n, l3.outputs);
        for i in 0..n {
            let h = hidden.row_mut(i);
            self.linear(l1, xs.row(i), h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            self.linear(l2, hidden.row(i), embeddings.row_mut(i));
            self.linear(l3, embeddings.row(i), logits.row_mut(i));
        }
        Ok(ForwardPass {
            hidden,
            embeddings,
            logits,
        })
    }

    fn linear(&self, layer: LayerShape, input: &[f64], out: &mut [f64]) {
        let w = &self.params[layer.weights()];
        let b = &self.params[layer.bias()];
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = dot(&w[o * layer.inputs..(o + 1) * layer.inputs], input) + b[o];
        }
    }

    /// Backpropagates upstream gradients on the logits and, optionally, on
    /// the embeddings through a cached forward pass of `xs`.
    pub fn backward(
        &self,
        xs: &RealMatrix,
        pass: &ForwardPass,
        d_logits: &RealMatrix,
        d_embeddings: Option<&RealMatrix>,
    ) -> Result<GradientSet> {
        let [l1, l2, l3] = self.dims.layers();
        let n = xs.rows();
        ensure_dim("backward logits rows", n, d_logits.rows())?;
        ensure_dim("backward logits cols", l3.outputs, d_logits.cols())?;
        if let Some(de) = d_embeddings {
            ensure_dim("backward embedding rows", n, de.rows())?;
            ensure_dim("backward embedding cols", l2.outputs, de.cols())?;
        }
        let mut g = GradientSet::zeros(self.dims);
        let p = &self.params;
        let mut de = vec![0.0; l2.outputs];
        let mut dh = vec![0.0; l1.outputs];
        for i in 0..n {
            let dz = d_logits.row(i);
            let e = pass.embeddings.row(i);
            let h = pass.hidden.row(i);

            // head
            match d_embeddings {
                Some(m) => de.copy_from_slice(m.row(i)),
                None => de.iter_mut().for_each(|v| *v = 0.0),
            }
            for (c, &dzc) in dz.iter().enumerate() {
                if dzc == 0.0 {
                    continue;
                }
                let w_row = l3.weight_offset + c * l3.inputs;
                axpy(&mut g.values[w_row..w_row + l3.inputs], dzc, e);
                g.values[l3.bias().start + c] += dzc;
                axpy(&mut de, dzc, &p[w_row..w_row + l3.inputs]);
            }

            // encoder layer 2
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (j, &dej) in de.iter().enumerate() {
                if dej == 0.0 {
                    continue;
                }
                let w_row = l2.weight_offset + j * l2.inputs;
                axpy(&mut g.values[w_row..w_row + l2.inputs], dej, h);
                g.values[l2.bias().start + j] += dej;
                axpy(&mut dh, dej, &p[w_row..w_row + l2.inputs]);
            }

            // encoder layer 1 through the rectifier
            let x = xs.row(i);
            for (k, &dhk) in dh.iter().enumerate() {
                if h[k] <= 0.0 || dhk == 0.0 {
                    continue;
                }
                let w_row = l1.weight_offset + k * l1.inputs;
                axpy(&mut g.values[w_row..w_row + l1.inputs], dhk, x);
                g.values[l1.bias().start + k] += dhk;
            }
        }
        Ok(g)
    }

    /// Hard predictions (argmax of logits, lowest index on ties).
    pub fn predict(&self, xs: &RealMatrix) -> Result<Vec<usize>> {
        let pass = self.forward_batch(xs)?;
        Ok(pass.logits.row_iter().map(argmax).collect())
    }

    /// `θ ← θ − lr · g`.
    pub fn apply_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !lr.is_finite() {
            return Err(Error::NonFinite("learning rate"));
        }
        ensure_dim("apply_step", self.params.len(), grads.values.len())?;
        if grads.dims != self.dims {
            return Err(invalid("grads", "shape differs from the model"));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.values) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// `teacher ← m · teacher + (1 − m) · student`.
    pub fn ema_update(&mut self, student: &MlpClassifier, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid("momentum", "must lie in [0, 1]"));
        }
        if student.dims != self.dims {
            return Err(invalid("student", "shape differs from the teacher"));
        }
        for (t, s) in self.params.iter_mut().zip(&student.params) {
            *t = momentum * *t + (1.0 - momentum) * s;
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn from_flat(dims: MlpDims, values: Vec<f64>) -> Result<Self> {
        ensure_dim("gradient length", dims.param_count(), values.len())?;
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// One slice per parameter tensor, in flatten order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        let [l1, l2, l3] = self.dims.layers();
        [
            &self.values[l1.weights()],
            &self.values[l1.bias()],
            &self.values[l2.weights()],
            &self.values[l2.bias()],
            &self.values[l3.weights()],
            &self.values[l3.bias()],
        ]
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) -> Result<()> {
        ensure_dim("gradient sum", self.values.len(), other.values.len())?;
        axpy(&mut self.values, scale, &other.values);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    if z.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    Ok(softmax_unchecked(z))
}

fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| exp(v - max)).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + ln(z.iter().map(|v| exp(v - max)).sum())
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &RealMatrix) -> RealMatrix {
    let mut out = RealMatrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        out.row_mut(i).copy_from_slice(&softmax_unchecked(logits.row(i)));
    }
    out
}

fn check_labels(ys: &[usize], classes: usize) -> Result<()> {
    match ys.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of a cached pass, plus its gradient on the logits.
pub fn ce_logit_grad(logits: &RealMatrix, ys: &[usize]) -> Result<(f64, RealMatrix)> {
    ensure_dim("labels", logits.rows(), ys.len())?;
    if ys.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    check_labels(ys, logits.cols())?;
    let n = ys.len() as f64;
    let mut loss = 0.0;
    let mut dz = RealMatrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in ys.iter().enumerate() {
        let z = logits.row(i);
        loss += log_sum_exp(z) - z[y];
        let p = softmax_unchecked(z);
        let row = dz.row_mut(i);
        for (c, pc) in p.iter().enumerate() {
            row[c] = (pc - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, dz))
}

/// Mean cross-entropy `−(1/n) Σ ln p_{y_i}` and its exact gradient.
pub fn ce_loss_and_grad(
    model: &MlpClassifier,
    xs: &RealMatrix,
    ys: &[usize],
) -> Result<(f64, GradientSet)> {
    if xs.rows() == 0 {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let pass = model.forward_batch(xs)?;
    let (loss, dz) = ce_logit_grad(&pass.logits, ys)?;
    let grads = model.backward(xs, &pass, &dz, None)?;
    Ok((loss, grads))
}

/// Mean cross-entropy without the gradient.
pub fn ce_loss(model: &MlpClassifier, xs: &RealMatrix, ys: &[usize]) -> Result<f64> {
    let pass = model.forward_batch(xs)?;
    Ok(ce_logit_grad(&pass.logits, ys)?.0)
}

/// Mean squared logit difference between student and a fixed teacher,
/// scaled by `weight`, with its gradient on the student.
pub fn consistency_loss_and_grad(
    student: &MlpClassifier,
    teacher: &MlpClassifier,
    xs: &RealMatrix,
    weight: f64,
) -> Result<(f64, GradientSet)> {
    if xs.rows() == 0 {
        return Err(Error::Empty("consistency batch"));
    }
    let pass = student.forward_batch(xs)?;
    let target = teacher.forward_batch(xs)?.logits;
    let count = (pass.logits.rows() * pass.logits.cols()) as f64;
    let mut loss = 0.0;
    let mut dz = RealMatrix::zeros(pass.logits.rows(), pass.logits.cols());
    for ((d, s), t) in dz
        .as_mut_slice()
        .iter_mut()
        .zip(pass.logits.as_slice())
        .zip(target.as_slice())
    {
        let diff = s - t;
        loss += diff * diff;
        *d = 2.0 * weight * diff / count;
    }
    let grads = student.backward(xs, &pass, &dz, None)?;
    Ok((weight * loss / count, grads))
}
