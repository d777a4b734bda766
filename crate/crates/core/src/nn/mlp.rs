use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Activation, Dense, ParamVector};
use crate::rng::Rng;

/// Sequence of dense layers over a shared parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Chain {
    pub layers: Vec<Dense>,
}

impl Chain {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last `last`.
    pub fn alloc(params: &mut ParamVector, prefix: &str, sizes: &[usize], hidden: Activation, last: Activation) -> Self {
        let n = sizes.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Dense::alloc(params, &format!("{prefix}.{i}"), sizes[i], sizes[i + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.input).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output).unwrap_or(0)
    }

    /// Returns the output of every layer; the last entry is the chain output.
    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let y = if i == 0 { l.forward(p, x) } else { l.forward(p, acts[i - 1].view()) };
            acts.push(y);
        }
        acts
    }

    pub fn forward_output(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for l in &self.layers {
            h = l.forward(p, h.view());
        }
        h
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView2<f64>,
        acts: &[Array2<f64>],
        dy: Array2<f64>,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { x } else { acts[i - 1].view() };
            let want = i > 0 || need_dx;
            d = self.layers[i].backward(p, g, input, acts[i].view(), d, want)?;
        }
        Some(d)
    }

    pub fn init(&self, p: &mut [f64], hidden_gain: f64, last_gain: f64, rng: &mut Rng) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            let gain = if i + 1 == n { last_gain } else { hidden_gain };
            l.init_orthogonal(p, gain, rng);
        }
    }
}

/// Stand-alone multilayer perceptron owning its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    chain: Chain,
    params: ParamVector,
}

impl Mlp {
    pub fn new(sizes: &[usize], hidden: Activation, hidden_gain: f64, last_gain: f64, rng: &mut Rng) -> Self {
        let mut params = ParamVector::new();
        let chain = Chain::alloc(&mut params, "mlp", sizes, hidden, Activation::Identity);
        chain.init(params.as_mut_slice(), hidden_gain, last_gain, rng);
        Self { chain, params }
    }

    pub fn input_dim(&self) -> usize {
        self.chain.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.chain.output_dim()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.chain.forward_output(self.params.as_slice(), x)
    }

    /// Forward pass keeping activations, then backward of `dy` into `grad`.
    pub fn forward_backward(
        &self,
        x: ArrayView2<f64>,
        dy_of: impl FnOnce(&Array2<f64>) -> Array2<f64>,
        grad: &mut ParamVector,
    ) -> Array2<f64> {
        let p = self.params.as_slice();
        let acts = self.chain.forward(p, x);
        let out = acts.last().cloned().unwrap_or_else(|| x.to_owned());
        let dy = dy_of(&out);
        self.chain.backward(p, grad.as_mut_slice(), x, &acts, dy, false);
        out
    }
}
