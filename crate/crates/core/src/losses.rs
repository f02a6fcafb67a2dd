//! Training objectives, as plain functions and as tape nodes.
//!
//! Spectra are `L x K` complex matrices where `K` counts only the physical
//! bins; the padded bins never enter a loss.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::pesqnet::PESQ_MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the spectral MSE against the PESQNet term.
    pub alpha: f64,
    /// Weight of the joint (dereverberating) target against the reverberant one.
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn check_weight(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")))
    }
}

fn spectral_mse(est: &Array2<Complex64>, target: &Array2<Complex64>) -> Result<f64> {
    if est.dim() != target.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", est.dim(), target.dim())));
    }
    let (l, k) = est.dim();
    if l * k == 0 {
        return Err(Error::Empty("spectrum".into()));
    }
    let sum: f64 = est
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            d.re * d.re + d.im * d.im
        })
        .sum();
    Ok(sum / (l * k) as f64)
}

/// Distance to the dry clean spectrum.
pub fn loss_joint(est: &Array2<Complex64>, clean: &Array2<Complex64>) -> Result<f64> {
    spectral_mse(est, clean)
}

/// Distance to the reverberant clean spectrum.
pub fn loss_noise(est: &Array2<Complex64>, reverberant: &Array2<Complex64>) -> Result<f64> {
    spectral_mse(est, reverberant)
}

pub fn loss_mse(
    est: &Array2<Complex64>,
    clean: &Array2<Complex64>,
    reverberant: &Array2<Complex64>,
    beta: f64,
) -> Result<f64> {
    check_weight("beta", beta)?;
    Ok(beta * loss_joint(est, clean)? + (1.0 - beta) * loss_noise(est, reverberant)?)
}

pub fn loss_pesq(pesq_hat: f64, pesq_true: f64) -> f64 {
    (pesq_hat - pesq_true).powi(2)
}

pub fn loss_pesqnet(pesq_hat: f64) -> f64 {
    (pesq_hat - PESQ_MAX).powi(2)
}

pub fn loss_total(j_mse: f64, j_pesqnet: f64, alpha: f64) -> Result<f64> {
    check_weight("alpha", alpha)?;
    Ok(alpha * j_mse + (1.0 - alpha) * j_pesqnet)
}

/// Tape version of the spectral MSE for `[1, 2, K, L]` tensors.
pub fn graph_spectral_mse(g: &mut Graph, est: Var, target: &Tensor) -> Var {
    assert_eq!(g.shape(est), target.shape(), "loss shape mismatch");
    let n = target.len() / 2;
    let t = g.constant(target.clone());
    let d = g.sub(est, t);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / n as f64)
}

pub fn graph_loss_mse(g: &mut Graph, est: Var, clean: &Tensor, reverberant: &Tensor, beta: f64) -> Var {
    let j = graph_spectral_mse(g, est, clean);
    let n = graph_spectral_mse(g, est, reverberant);
    let j = g.scale(j, beta);
    let n = g.scale(n, 1.0 - beta);
    g.add(j, n)
}

pub fn graph_loss_pesq(g: &mut Graph, pesq_hat: Var, pesq_true: f64) -> Var {
    let d = g.offset(pesq_hat, -pesq_true);
    g.square(d)
}

pub fn graph_loss_pesqnet(g: &mut Graph, pesq_hat: Var) -> Var {
    graph_loss_pesq(g, pesq_hat, PESQ_MAX)
}

pub fn graph_loss_total(g: &mut Graph, j_mse: Var, j_pesqnet: Var, alpha: f64) -> Var {
    let a = g.scale(j_mse, alpha);
    let b = g.scale(j_pesqnet, 1.0 - alpha);
    let a = g.reshape(a, &[1]);
    let b = g.reshape(b, &[1]);
    g.add(a, b)
}
