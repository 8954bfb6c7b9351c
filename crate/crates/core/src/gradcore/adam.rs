//! Adam with decoupled weight decay.
//!
//! Per coordinate, with bias-corrected moments `m_hat`, `v_hat`:
//! `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)`.
//! The decay term uses the parameter value before the update and is not
//! folded into the moment estimates.

use serde::{Deserialize, Serialize};

use super::network::ModelParams;
use super::tensor::{Scalar, Tensor};
use super::GradError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer moments aligned with the [`ModelParams`] enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub hyper: AdamHyper,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>, hyper: AdamHyper) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.value.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            hyper,
        }
    }

    /// Apply one update in place. Gradients must follow the parameter order.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<(), GradError> {
        if grads.len() != params.tensors.len() || self.m.len() != params.tensors.len() {
            return Err(GradError::Shape {
                what: "gradient list",
                expected: format!("{} tensors", params.tensors.len()),
                got: format!("{} tensors", grads.len()),
            });
        }
        for (p, g) in params.tensors.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(GradError::Shape {
                    what: "gradient tensor",
                    expected: format!("{} {:?}", p.name, p.value.shape()),
                    got: format!("{:?}", g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(GradError::NonFiniteGradient(p.name.clone()));
            }
        }

        self.step += 1;
        let h = self.hyper;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - h.beta1.powi(t));
        let bc2 = T::of(1.0 - h.beta2.powi(t));
        let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
        let (one, lr, eps, wd) = (T::one(), T::of(h.lr), T::of(h.eps), T::of(h.weight_decay));
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
            }
        }
        Ok(())
    }
}
