use serde::{Deserialize, Serialize};

use super::{DenseMatrix, SeededRng};
use crate::error::{Result, ToeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative in terms of the pre-activation. ReLU uses 0 at the kink.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer `act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A feed-forward stack of [`Layer`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Per-layer inputs and pre-activations recorded by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpParams {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and
    /// biases. `dims` lists widths from input to output.
    pub fn init(dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut weight = DenseMatrix::zeros(fan_out, fan_in);
                for v in weight.data_mut() {
                    *v = rng.uniform_range(-bound, bound);
                }
                let bias = (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
                Layer {
                    weight,
                    bias,
                    activation,
                }
            })
            .collect();
        MlpParams { layers }
    }

    /// All-zero parameters with the given shape.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weight: DenseMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation,
            })
            .collect();
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Checks that layer shapes chain and all values are finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(ToeError::dim("mlp has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(ToeError::dim(format!("layer {i}: bias length {} != {}", l.bias.len(), l.weight.rows())));
            }
            if l.weight.data().len() != l.weight.rows() * l.weight.cols() {
                return Err(ToeError::dim(format!("layer {i}: weight buffer does not match shape")));
            }
            if i > 0 && self.layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(ToeError::dim(format!("layer {i} input width does not chain")));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(ToeError::invalid(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.apply(input))
    }

    pub(crate) fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for l in &self.layers {
            let mut z = l.weight.matvec(&x);
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi = l.activation.apply(*zi + bi);
            }
            x = z;
        }
        x
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.to_vec();
        for l in &self.layers {
            let mut z = l.weight.matvec(&x);
            for (zi, bi) in z.iter_mut().zip(&l.bias) {
                *zi += bi;
            }
            let out = z.iter().map(|&v| l.activation.apply(v)).collect();
            inputs.push(std::mem::replace(&mut x, out));
            pre.push(z);
        }
        Ok((x, MlpCache { inputs, pre }))
    }

    /// Gradients of `output . upstream` with respect to every parameter and
    /// the input.
    pub fn backward(&self, cache: &MlpCache, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self.backward_into(cache, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, cache: &MlpCache, upstream: &[f64], grads: &mut MlpGrads) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(ToeError::dim("cache or gradient buffer does not match the network depth"));
        }
        if upstream.len() != self.output_dim() {
            return Err(ToeError::dim(format!(
                "upstream length {} != output width {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        let mut delta = upstream.to_vec();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[idx];
            let input = &cache.inputs[idx];
            if pre.len() != l.weight.rows() || input.len() != l.weight.cols() {
                return Err(ToeError::dim(format!("cache shape mismatch at layer {idx}")));
            }
            for (d, &z) in delta.iter_mut().zip(pre) {
                *d *= l.activation.derivative(z);
            }
            let g = &mut grads.layers[idx];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[r] += d;
                for (w, &x) in g.weight.row_mut(r).iter_mut().zip(input) {
                    *w += d * x;
                }
            }
            delta = l.weight.matvec_t(&delta);
        }
        Ok(delta)
    }

    /// `p <- p - lr * g`
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(ToeError::dim("gradient depth does not match parameters"));
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            if g.weight.data().len() != l.weight.data().len() || g.bias.len() != l.bias.len() {
                return Err(ToeError::dim("gradient shape does not match parameters"));
            }
            for (w, gw) in l.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *w -= lr * gw;
            }
            for (b, gb) in l.bias.iter_mut().zip(&g.bias) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(ToeError::dim(format!(
                "input length {} != expected {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DenseMatrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.data().iter().all(|&v| v == 0.0) && g.bias.iter().all(|&v| v == 0.0))
    }
}
