//! Dense networks with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat [`ParamVector`]; layers are views into it by
//! offset. Gradients use a buffer of identical layout, so optimizers and
//! checkpoints only ever deal with flat `f64` slices.

pub mod gradcheck;
mod mlp;
mod network;
mod optim;

pub use mlp::Mlp;
pub use network::{
    AgentNetwork, CounterfactualOutput, ForwardBatch, ForwardOutput, HeadAdjoints, Latent, NetConfig, Tape,
    StreamValues, VALUE_COMM, VALUE_EXT, VALUE_INT,
};
pub use optim::{clip_grad_norm, grad_norm, Adam, AdamState};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with a named-slice index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self { data: Vec::new(), segments: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let offset = self.data.len();
        self.data.resize(offset + len, 0.0);
        self.segments.push(Segment { name: name.into(), offset, len });
        offset
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.segment(name).map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.segment(name)?.clone();
        Some(&mut self.data[s.offset..s.offset + s.len])
    }

    /// Zero buffer with the same layout, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self { data: vec![0.0; self.data.len()], segments: self.segments.clone() }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Multiply `dy` in place by the derivative, expressed through the
    /// activation output `y`.
    fn backprop(self, y: ArrayView2<f64>, dy: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Tanh => dy.zip_mut_with(&y, |d, &a| *d *= 1.0 - a * a),
            Activation::Relu => dy.zip_mut_with(&y, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            }),
        }
    }
}

/// Affine layer `y = act(x W + b)` with `W` stored row-major as `(input, output)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    w: usize,
    b: usize,
}

impl Dense {
    pub(crate) fn alloc(
        params: &mut ParamVector,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Self {
        let w = params.push(format!("{name}.w"), input * output);
        let b = params.push(format!("{name}.b"), output);
        Self { name: name.to_string(), input, output, activation, w, b }
    }

    pub fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.input, self.output), &p[self.w..self.w + self.input * self.output])
            .expect("layer layout")
    }

    pub fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.output]
    }

    pub fn param_range(&self) -> std::ops::Range<usize> {
        self.w..self.b + self.output
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = Array2::<f64>::zeros((x.nrows(), self.output));
        self.forward_into(p, x, &mut y);
        y
    }

    fn forward_into(&self, p: &[f64], x: ArrayView2<f64>, y: &mut Array2<f64>) {
        debug_assert_eq!(x.ncols(), self.input, "{}", self.name);
        let b = self.bias(p);
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v = *bb);
        }
        general_mat_mul(1.0, &x, &self.weight(p), 1.0, y);
        self.activation.apply(y);
    }

    /// Accumulates parameter gradients into `g` and returns the input adjoint.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
        mut dy: Array2<f64>,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        self.activation.backprop(y, &mut dy);
        {
            let (gw, gb) = g[self.w..self.b + self.output].split_at_mut(self.input * self.output);
            let mut gw = ArrayViewMut2::from_shape((self.input, self.output), gw).expect("layer layout");
            general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut gw);
            let colsum = dy.sum_axis(Axis(0));
            gb.iter_mut().zip(colsum.iter()).for_each(|(a, b)| *a += b);
        }
        if need_dx {
            let mut dx = Array2::<f64>::zeros((dy.nrows(), self.input));
            general_mat_mul(1.0, &dy, &self.weight(p).t(), 0.0, &mut dx);
            Some(dx)
        } else {
            None
        }
    }

    /// Orthogonal initialization of the weight with the given gain; zero bias.
    pub fn init_orthogonal(&self, p: &mut [f64], gain: f64, rng: &mut Rng) {
        let q = orthogonal(self.input, self.output, rng);
        p[self.w..self.w + self.input * self.output]
            .iter_mut()
            .zip(q.iter())
            .for_each(|(dst, v)| *dst = gain * v);
        p[self.b..self.b + self.output].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `(rows, cols)` matrix with orthonormal columns (if rows >= cols) or rows.
fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Array2<f64> {
    let (n, m) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // m vectors of length n, modified Gram-Schmidt
    let mut vecs: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..m {
        for j in 0..i {
            let (head, tail) = vecs.split_at_mut(i);
            let d: f64 = head[j].iter().zip(tail[0].iter()).map(|(a, b)| a * b).sum();
            tail[0].iter_mut().zip(head[j].iter()).for_each(|(a, b)| *a -= d * b);
        }
        let norm = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        vecs[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for (k, v) in vecs.iter().enumerate() {
        for (l, x) in v.iter().enumerate() {
            if rows >= cols {
                out[[l, k]] = *x;
            } else {
                out[[k, l]] = *x;
            }
        }
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}
