use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adam with bias correction. Moments are kept per array in store order;
/// non-trainable arrays are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
    pub(crate) t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |a: &super::ParamArray<T>| vec![T::zero(); a.numel()];
        Adam {
            config,
            m: store.arrays().iter().map(zeros).collect(),
            v: store.arrays().iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamConfig, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64) -> Self {
        Adam { config, m, v, t }
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![store.len()],
            });
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (i, a) in store.arrays_mut().iter_mut().enumerate() {
            if !a.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != a.numel() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: a.shape.clone(),
                });
            }
            for j in 0..a.numel() {
                let g = a.grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                a.values[j] = a.values[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
