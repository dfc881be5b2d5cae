//! Feed-forward networks over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::rng::Rng;
use super::tape::{Leaves, Scalar, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    /// Returns `(value, derivative)` at `pre`.
    #[inline]
    fn eval(self, pre: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Relu => {
                if pre > 0.0 {
                    (pre, 1.0)
                } else if pre <= 0.0 {
                    (0.0, 0.0)
                } else {
                    (pre, pre)
                }
            }
            Activation::Identity => (pre, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn num_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// How a network's parameters enter a tape.
#[derive(Clone, Copy, Debug)]
pub enum Binding {
    /// Parameters are leaves on the tape and receive adjoints.
    Tracked(Leaves),
    /// Parameters are constants; no adjoint can reach them.
    Frozen,
}

/// Parameters of a multilayer perceptron.
///
/// Each layer stores its weights row-major (`outputs x inputs`) followed by
/// its bias, all inside one flat vector so optimizers can treat the network
/// as a single parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

impl MlpParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut net = Self::zeros(input_dim, hidden, output_dim, hidden_activation);
        let mut offset = 0;
        for layer in &net.layers {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let n_weights = layer.inputs * layer.outputs;
            for w in &mut net.params[offset..offset + n_weights] {
                *w = limit * (2.0 * rng.uniform() - 1.0);
            }
            offset += layer.num_params();
        }
        net
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize, hidden_activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &width in hidden {
            layers.push(LayerShape {
                inputs: fan_in,
                outputs: width,
                activation: hidden_activation,
            });
            fan_in = width;
        }
        layers.push(LayerShape {
            inputs: fan_in,
            outputs: output_dim,
            activation: Activation::Identity,
        });
        let n = layers.iter().map(LayerShape::num_params).sum();
        MlpParams {
            layers,
            params: vec![0.0; n],
        }
    }

    /// Build from explicit `(weights, bias, activation)` triples, weights row-major.
    pub fn from_layers(layers: Vec<(Vec<f64>, Vec<f64>, Activation)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        let mut shapes = Vec::new();
        let mut params = Vec::new();
        let mut prev: Option<usize> = None;
        for (weights, bias, activation) in layers {
            let outputs = bias.len();
            if outputs == 0 || weights.len() % outputs != 0 {
                return Err(Error::invalid(
                    "layers",
                    "weight count is not a multiple of the bias length",
                ));
            }
            let inputs = weights.len() / outputs;
            if let Some(p) = prev {
                Error::check_dim("layer input", p, inputs)?;
            }
            prev = Some(outputs);
            shapes.push(LayerShape {
                inputs,
                outputs,
                activation,
            });
            params.extend(weights);
            params.extend(bias);
        }
        Ok(MlpParams { layers: shapes, params })
    }

    /// Check that a deserialized network is internally consistent.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for pair in self.layers.windows(2) {
            Error::check_dim("layer input", pair[0].outputs, pair[1].inputs)?;
        }
        let n: usize = self.layers.iter().map(LayerShape::num_params).sum();
        Error::check_dim("parameter count", n, self.params.len())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the last layer's bias inside [`Self::params`].
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let end = self.params.len();
        end - self.output_dim()..end
    }

    /// Register the parameters as tape leaves.
    pub fn track(&self, tape: &mut Tape) -> Binding {
        Binding::Tracked(tape.leaves(&self.params))
    }

    /// Plain forward pass, no tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("network input", self.input_dim(), input.len())?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let mut offset = 0;
        for layer in &self.layers {
            let (weights, rest) = self.params[offset..].split_at(layer.inputs * layer.outputs);
            let bias = &rest[..layer.outputs];
            next.clear();
            for (row, b) in weights.chunks_exact(layer.inputs).zip(bias) {
                let pre = b + row.iter().zip(&cur).map(|(w, x)| w * x).sum::<f64>();
                next.push(layer.activation.eval(pre).0);
            }
            std::mem::swap(&mut cur, &mut next);
            offset += layer.num_params();
        }
        Ok(cur)
    }

    /// Forward pass recorded on `tape`.
    ///
    /// Each neuron (affine map plus activation) becomes a single node whose
    /// edges point at the tracked weights and tracked inputs.
    pub fn apply(&self, tape: &mut Tape, binding: Binding, input: &[Scalar]) -> Result<Vec<Scalar>> {
        Error::check_dim("network input", self.input_dim(), input.len())?;
        if let Binding::Tracked(leaves) = binding {
            Error::check_dim("bound parameters", self.params.len(), leaves.len())?;
        }
        let mut cur: Vec<Scalar> = input.to_vec();
        let mut cur_vals: Vec<f64> = tape.values(input);
        let mut offset = 0;
        for layer in &self.layers {
            let mut next = Vec::with_capacity(layer.outputs);
            let mut next_vals = Vec::with_capacity(layer.outputs);
            let inputs_const = cur.iter().all(|s| s.is_const());
            for j in 0..layer.outputs {
                let row_start = offset + j * layer.inputs;
                let bias_idx = offset + layer.inputs * layer.outputs + j;
                let row = &self.params[row_start..row_start + layer.inputs];
                let pre = self.params[bias_idx] + row.iter().zip(&cur_vals).map(|(w, x)| w * x).sum::<f64>();
                let (value, slope) = layer.activation.eval(pre);
                let frozen = matches!(binding, Binding::Frozen);
                if frozen && inputs_const {
                    next.push(Scalar::Const(value));
                    next_vals.push(value);
                    continue;
                }
                tape.begin();
                if slope != 0.0 {
                    for i in 0..layer.inputs {
                        if let Binding::Tracked(leaves) = binding {
                            if let Scalar::Node(id) = leaves.get(row_start + i) {
                                tape.edge(id, slope * cur_vals[i]);
                            }
                        }
                        if let Scalar::Node(id) = cur[i] {
                            tape.edge(id, slope * row[i]);
                        }
                    }
                    if let Binding::Tracked(leaves) = binding {
                        if let Scalar::Node(id) = leaves.get(bias_idx) {
                            tape.edge(id, slope);
                        }
                    }
                }
                next.push(Scalar::Node(tape.finish(value)));
                next_vals.push(value);
            }
            cur = next;
            cur_vals = next_vals;
            offset += layer.num_params();
        }
        Ok(cur)
    }
}

/// Activations kept by [`MlpParams::forward_batch`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct BatchCache {
    rows: usize,
    /// Input matrix of every layer, then the network output.
    acts: Vec<Vec<f64>>,
    /// Activation derivative at every pre-activation, per layer.
    slopes: Vec<Vec<f64>>,
    transposed: Vec<f64>,
}

impl BatchCache {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| &v[..]).unwrap_or(&[])
    }
}

impl MlpParams {
    /// Forward pass over `rows` inputs stored row-major in `input`.
    /// Returns the `rows x output_dim` output matrix.
    pub fn forward_batch<'c>(&self, input: &[f64], rows: usize, cache: &'c mut BatchCache) -> Result<&'c [f64]> {
        Error::check_dim("batch input", rows * self.input_dim(), input.len())?;
        let n = self.layers.len();
        cache.rows = rows;
        cache.acts.resize_with(n + 1, Vec::new);
        cache.slopes.resize_with(n, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (weights, rest) = self.params[offset..].split_at(layer.inputs * layer.outputs);
            let bias = &rest[..layer.outputs];
            let (done, todo) = cache.acts.split_at_mut(l + 1);
            let x = &done[l];
            let out = &mut todo[0];
            let slopes = &mut cache.slopes[l];
            // Transposed weights turn each row's product into axpy updates over
            // the outputs, which vectorize; a per-output dot product does not.
            let wt = &mut cache.transposed;
            wt.clear();
            wt.resize(weights.len(), 0.0);
            for (j, w_row) in weights.chunks_exact(layer.inputs).enumerate() {
                for (i, &w) in w_row.iter().enumerate() {
                    wt[i * layer.outputs + j] = w;
                }
            }
            out.clear();
            out.resize(rows * layer.outputs, 0.0);
            slopes.clear();
            slopes.resize(rows * layer.outputs, 0.0);
            for ((row, pre), slope) in x
                .chunks_exact(layer.inputs)
                .zip(out.chunks_exact_mut(layer.outputs))
                .zip(slopes.chunks_exact_mut(layer.outputs))
            {
                pre.copy_from_slice(bias);
                for (&xi, w_col) in row.iter().zip(wt.chunks_exact(layer.outputs)) {
                    for (p, &w) in pre.iter_mut().zip(w_col) {
                        *p += xi * w;
                    }
                }
                for (p, s) in pre.iter_mut().zip(slope.iter_mut()) {
                    let (value, d) = layer.activation.eval(*p);
                    *p = value;
                    *s = d;
                }
            }
            offset += layer.num_params();
        }
        Ok(cache.output())
    }

    /// Vector-Jacobian product for the last [`forward_batch`](Self::forward_batch).
    ///
    /// `out_grad` is `rows x output_dim`. Parameter gradients are accumulated
    /// into `param_grad` (summed over rows); input gradients overwrite
    /// `input_grad` (`rows x input_dim`).
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        out_grad: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        let rows = cache.rows;
        Error::check_dim("batch cache", self.layers.len() + 1, cache.acts.len())?;
        Error::check_dim("batch output gradient", rows * self.output_dim(), out_grad.len())?;
        if let Some(g) = param_grad.as_deref() {
            Error::check_dim("parameter gradient", self.params.len(), g.len())?;
        }
        if let Some(g) = input_grad.as_deref() {
            Error::check_dim("input gradient", rows * self.input_dim(), g.len())?;
        }
        let mut delta_out = out_grad.to_vec();
        let mut delta_in = Vec::new();
        let mut offset = self.params.len();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            offset -= layer.num_params();
            let x = &cache.acts[l];
            for (d, s) in delta_out.iter_mut().zip(&cache.slopes[l]) {
                *d *= s;
            }
            if let Some(g) = param_grad.as_deref_mut() {
                let (gw, rest) = g[offset..offset + layer.num_params()].split_at_mut(layer.inputs * layer.outputs);
                let gb = &mut rest[..layer.outputs];
                for (d_row, x_row) in delta_out.chunks_exact(layer.outputs).zip(x.chunks_exact(layer.inputs)) {
                    for ((&d, gw_row), gb) in d_row.iter().zip(gw.chunks_exact_mut(layer.inputs)).zip(gb.iter_mut()) {
                        if d != 0.0 {
                            for (g, xv) in gw_row.iter_mut().zip(x_row) {
                                *g += d * xv;
                            }
                            *gb += d;
                        }
                    }
                }
            }
            if l == 0 && input_grad.is_none() {
                break;
            }
            let weights = &self.params[offset..offset + layer.inputs * layer.outputs];
            delta_in.clear();
            delta_in.resize(rows * layer.inputs, 0.0);
            for (d_row, din) in delta_out
                .chunks_exact(layer.outputs)
                .zip(delta_in.chunks_exact_mut(layer.inputs))
            {
                for (&d, w) in d_row.iter().zip(weights.chunks_exact(layer.inputs)) {
                    if d != 0.0 {
                        for (g, wv) in din.iter_mut().zip(w) {
                            *g += d * wv;
                        }
                    }
                }
            }
            std::mem::swap(&mut delta_out, &mut delta_in);
        }
        if let Some(g) = input_grad {
            g.copy_from_slice(&delta_out);
        }
        Ok(())
    }
}
