//! Small fully connected networks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// One affine layer `y = W x + b`, optionally followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub relu: bool,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, relu: bool) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            relu,
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, bias zero.
    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, relu: bool, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.random_range(-a..a));
        Self {
            weight,
            bias: Array1::zeros(output),
            relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.affine(x);
        if self.relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            weight: mlp.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: mlp.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Config(format!("layer {i}: bias length mismatch")));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Config(format!("layer {i}: non-finite weights")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Config(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `widths = [in, h1, ..., out]`; rectifiers between layers, linear output.
    pub fn xavier<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("bad MLP widths {widths:?}")));
        }
        let last = widths.len() - 2;
        Self::new(
            widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Dense::xavier(w[0], w[1], i != last, rng))
                .collect(),
        )
    }

    /// A single linear layer copying the first `min(input, output)` channels.
    pub fn identity(input: usize, output: usize) -> Self {
        let mut l = Dense::zeros(input, output, false);
        for i in 0..input.min(output) {
            l.weight[(i, i)] = 1.0;
        }
        Self { layers: vec![l] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for l in &self.layers[1..] {
            h = l.forward(h.view());
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for l in &self.layers {
            let z = l.affine(h.view());
            inputs.push(h);
            h = if l.relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        (
            h,
            MlpCache {
                inputs,
                pre_activations: pre,
            },
        )
    }

    /// Returns `(d input, d parameters)` for upstream gradient `grad_out`.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>) -> (Array2<f64>, MlpGrads) {
        let n_layers = self.layers.len();
        let mut weight = Vec::with_capacity(n_layers);
        let mut bias = Vec::with_capacity(n_layers);
        let mut g = grad_out.to_owned();
        for (idx, l) in self.layers.iter().enumerate().rev() {
            if l.relu {
                g.zip_mut_with(&cache.pre_activations[idx], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            weight.push(g.t().dot(&cache.inputs[idx]));
            bias.push(g.sum_axis(Axis(0)));
            g = g.dot(&l.weight);
        }
        weight.reverse();
        bias.reverse();
        (g, MlpGrads { weight, bias })
    }

    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        for ((l, gw), gb) in self.layers.iter_mut().zip(&grads.weight).zip(&grads.bias) {
            l.weight.scaled_add(-lr, gw);
            l.bias.scaled_add(-lr, gb);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable views over every parameter, weights then bias, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }
}
