use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use super::{Result, Rng};

/// Output nonlinearity of the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Fully connected network with ReLU hidden layers. Weights are `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub output: OutputActivation,
}

impl<T: Real> Mlp<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], output: OutputActivation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (inp, out) = (pair[0], pair[1]);
            let a = (6.0 / (inp + out) as f64).sqrt();
            weights.push(Tensor::from_fn(&[out, inp], |_| T::of(rng.gen_range(-a..a))));
            biases.push(Tensor::zeros(&[out]));
        }
        Mlp { weights, biases, output }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].shape()[1]];
        s.extend(self.weights.iter().map(|w| w.shape()[0]));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.shape()[0]).unwrap_or(0)
    }

    /// Tape-free forward pass on `x: [rows, in]`.
    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        let layers: Vec<_> = self.weights.iter().zip(&self.biases).collect();
        kernels::mlp_forward(&layers, self.output == OutputActivation::Sigmoid, x, rows)
    }

    /// Parameters in checkpoint order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
            output: self.output,
        }
    }
}

/// Tape handles for the parameters of one [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub output: OutputActivation,
}

impl MlpVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, mlp: &Mlp<T>) -> Self {
        let layers = mlp
            .weights
            .iter()
            .zip(&mlp.biases)
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect();
        MlpVars { layers, output: mlp.output }
    }

    /// Leaf handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if l < last {
                h = tape.relu(h)?;
            } else if self.output == OutputActivation::Sigmoid {
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }
}
