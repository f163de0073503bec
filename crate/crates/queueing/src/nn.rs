//! Fully connected networks with tanh hidden layers and a linear output,
//! differentiated by hand.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{QueueError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l+1] × sizes[l]`, row-major.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Activations of one forward pass, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input, then the post-activation output of every layer.
    activations: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape has an input")
    }
}

impl Mlp {
    /// All-zero network with the given layer sizes (input first).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(QueueError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: sizes[1..].iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Gaussian weights with variance `1/fan_in`; the last layer is further
    /// scaled by `output_scale`. Biases start at zero.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let layers = net.weights.len();
        for (l, w) in net.weights.iter_mut().enumerate() {
            let mut std = (1.0 / sizes[l] as f64).sqrt();
            if l + 1 == layers {
                std *= output_scale;
            }
            let normal = Normal::new(0.0, std).expect("finite deviation");
            for v in w.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Network with the given layers; `weights[l]` is `out × in`, row-major.
    pub fn from_layers(weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(QueueError::Shape(
                "one bias vector per weight matrix required".into(),
            ));
        }
        let mut sizes = Vec::with_capacity(weights.len() + 1);
        for (w, b) in weights.iter().zip(&biases) {
            if b.is_empty() || w.len() % b.len() != 0 {
                return Err(QueueError::Shape(format!(
                    "weight length {} does not fit {} outputs",
                    w.len(),
                    b.len()
                )));
            }
            let n_in = w.len() / b.len();
            if let Some(&prev) = sizes.last() {
                if prev != n_in {
                    return Err(QueueError::Shape(format!(
                        "layer expects {n_in} inputs, previous layer gives {prev}"
                    )));
                }
            } else {
                sizes.push(n_in);
            }
            sizes.push(b.len());
        }
        let mut net = Self::zeros(&sizes)?;
        net.weights = weights;
        net.biases = biases;
        Ok(net)
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(QueueError::Shape(format!(
                "network has {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&values[k..k + nw]);
            k += nw;
            b.copy_from_slice(&values[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .flatten()
            .all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(QueueError::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn layer(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.weights[l];
        let hidden = l + 2 < self.sizes.len();
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = self.biases[l][o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if hidden {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.weights.len() {
            a = self.layer(l, &a);
        }
        Ok(a)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: &[f64]) -> Result<MlpTape> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x.to_vec());
        for l in 0..self.weights.len() {
            let next = self.layer(l, &activations[l]);
            activations.push(next);
        }
        Ok(MlpTape { activations })
    }

    /// Accumulates `∂L/∂θ` into `grads` (laid out as [`Mlp::to_flat`]) given
    /// `∂L/∂output`, and returns `∂L/∂input`.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.output_dim(), "output gradient length");
        assert_eq!(grads.len(), self.num_params(), "gradient buffer length");
        let layers = self.weights.len();
        let mut offsets = Vec::with_capacity(layers);
        let mut k = 0;
        for l in 0..layers {
            offsets.push(k);
            k += self.weights[l].len() + self.biases[l].len();
        }
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                // tanh′ = 1 − tanh²
                for (d, a) in delta.iter_mut().zip(&tape.activations[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &tape.activations[l];
            let (gw, gb) =
                grads[offsets[l]..offsets[l] + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let w = &self.weights[l];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * n_in..(o + 1) * n_in];
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    prev[i] += d * row[i];
                }
            }
            delta = prev;
        }
        delta
    }
}
