use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Tensor};
use crate::checkpoint::TensorData;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSpec {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSpec {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments are aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub spec: AdamSpec,
    pub lr: f64,
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, spec: AdamSpec) -> Self {
        Self {
            spec,
            lr,
            steps: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.steps += 1;
        let AdamSpec { beta1, beta2, eps } = self.spec;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let lr = self.lr;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }

    pub fn to_state(&self) -> AdamState {
        AdamState {
            spec: self.spec,
            lr: self.lr,
            steps: self.steps,
            m: self.m.iter().map(TensorData::from).collect(),
            v: self.v.iter().map(TensorData::from).collect(),
        }
    }

    pub fn from_state(s: AdamState, params: &ParamSet) -> Result<Self> {
        let m: Vec<Tensor> = s.m.into_iter().map(Tensor::try_from).collect::<Result<_>>()?;
        let v: Vec<Tensor> = s.v.into_iter().map(Tensor::try_from).collect::<Result<_>>()?;
        let ok = m.len() == params.len()
            && v.len() == params.len()
            && params
                .tensors()
                .iter()
                .zip(m.iter().zip(&v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            spec: s.spec,
            lr: s.lr,
            steps: s.steps,
            m,
            v,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub spec: AdamSpec,
    pub lr: f64,
    pub steps: u64,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// new best validation loss; training stops once it falls below `stop_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub stop_lr: f64,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, stop_lr: f64) -> Self {
        Self {
            patience: 5,
            factor: 0.5,
            stop_lr,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Returns `true` when `val` is a new best.
    pub fn observe(&mut self, val: f64) -> bool {
        if self.best.is_none_or(|b| val < b) {
            self.best = Some(val);
            self.bad_epochs = 0;
            return true;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        false
    }

    pub fn should_stop(&self) -> bool {
        self.lr < self.stop_lr
    }
}

/// Running sum of gradients; `finalize` returns their arithmetic mean.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sum: Option<Vec<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_active(&self) -> bool {
        self.count > 0
    }

    pub fn add(&mut self, grads: &[Tensor]) {
        match &mut self.sum {
            Some(s) => {
                for (a, g) in s.iter_mut().zip(grads) {
                    *a += g;
                }
            }
            None => self.sum = Some(grads.to_vec()),
        }
        self.count += 1;
    }

    pub fn finalize(&mut self) -> Result<Vec<Tensor>> {
        let sum = self
            .sum
            .take()
            .ok_or_else(|| Error::Empty("gradient accumulator".into()))?;
        let n = self.count as f64;
        self.count = 0;
        Ok(sum.into_iter().map(|t| t / n).collect())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
}

pub fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}
