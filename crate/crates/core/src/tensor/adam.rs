use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a named parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    /// name → (first moment, second moment)
    pub moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    /// Zeroed moments for every entry of `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = (&'a String, &'a Tensor<S>)>) -> Self {
        let moments = params
            .into_iter()
            .map(|(k, t)| (k.clone(), (Tensor::zeros(t.shape()), Tensor::zeros(t.shape()))))
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    ///
    /// All gradients are checked before anything is written, so a NaN leaves
    /// parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let Some(p) = params.get(name) else {
                return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
            };
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::non_finite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let (one, lr, eps) = (S::one(), S::of(c.lr), S::of(c.eps));
        let (bc1, bc2) = (S::of(bc1), S::of(bc2));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((w, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
