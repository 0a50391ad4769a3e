//! AdamW with decoupled weight decay.
//!
//! ```text
//! θ ← θ·(1 − lr·λ)
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid AdamW config {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Optimizer state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter; frozen ones are skipped. Each
    /// trainable parameter must carry a gradient from the latest backward
    /// pass, which this step then consumes.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Parameter<T>)>,
    {
        let mut trainable: Vec<(String, &'a mut Parameter<T>)> =
            params.into_iter().filter(|(_, p)| p.trainable).collect();
        if let Some((name, _)) = trainable.iter().find(|(_, p)| !p.has_fresh_grad()) {
            return Err(Error::StaleGradient(name.clone()));
        }
        self.step += 1;
        let cfg = self.config;
        let t = self.step as i32;
        let lr = T::of(cfg.lr);
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let eps = T::of(cfg.epsilon);
        let decay = T::one() - lr * T::of(cfg.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let one = T::one();
        for (name, p) in trainable.iter_mut() {
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            if mom.m.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "optimizer state for `{name}` has shape {:?}, parameter has {:?}",
                    mom.m.shape(),
                    p.value.shape()
                )));
            }
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            let (ms, vs) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..values.len() {
                let g = grads[i];
                ms[i] = b1 * ms[i] + (one - b1) * g;
                vs[i] = b2 * vs[i] + (one - b2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.value.ensure_finite(name)?;
            p.consume_grad();
        }
        Ok(())
    }
}
