use super::tensor::{Real, Tensor};
use super::{NnError, Result};

/// Adam with bias correction. Defaults match the usual
/// `β1 = 0.9, β2 = 0.999, eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    lr_scale: Vec<f64>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[&Tensor<T>], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            lr_scale: vec![1.0; params.len()],
        }
    }

    /// Multiplies the learning rate of parameter `idx`.
    pub fn set_lr_scale(&mut self, idx: usize, scale: f64) {
        self.lr_scale[idx] = scale;
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape(format!("adam: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = T::of(self.lr * self.lr_scale[k]);
            let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gv;
                v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
                let mhat = m[j] * ibc1;
                let vhat = v[j] * ibc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
