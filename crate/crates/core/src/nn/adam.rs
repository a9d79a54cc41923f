//! Adam with bias correction.

use indexmap::IndexMap;

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    moments: IndexMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    /// Zero moments for every trainable parameter of `params`.
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let moments = params
            .iter()
            .filter(|(_, e)| !e.kind.is_buffer())
            .map(|(name, e)| {
                let n = e.tensor.numel();
                (name.to_string(), (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        AdamState {
            config,
            t: 0,
            moments,
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every parameter that has a gradient entry; the rest are
    /// left untouched. Validates all gradients before writing anything.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            let (m, _) = self
                .moments
                .get(name)
                .ok_or_else(|| Error::MissingParam(format!("optimizer state for `{name}`")))?;
            if p.tensor.dims() != g.tensor.dims() || m.len() != p.tensor.numel() {
                return Err(Error::shape(
                    name,
                    format!("gradient dims {:?} vs parameter {:?}", g.tensor.dims(), p.tensor.dims()),
                ));
            }
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let bc1 = (1.0 - (b1 as f64).powi(self.t as i32)) as f32;
        let bc2 = (1.0 - (b2 as f64).powi(self.t as i32)) as f32;
        for (name, g) in grads.iter() {
            let (m, v) = self.moments.get_mut(name).expect("validated");
            let p = params.get_mut(name).expect("validated");
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.tensor.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
