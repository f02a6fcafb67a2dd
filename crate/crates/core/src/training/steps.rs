//! Per-utterance forward/backward building blocks shared by all phases.

use ndarray::{Axis, IxDyn, Slice};

use super::data::{Dataset, PreparedUtterance};
use crate::autograd::{Graph, Tensor, Var};
use crate::dsp::{istft_ola, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::fcrn::{tensor_to_complex, Fcrn};
use crate::losses::{self, LossWeights};
use crate::oracle::QualityOracle;
use crate::pesqnet::PesqNet;

/// Enhanced spectrum `[1, 2, K_in, L]` as a tape node.
pub fn dns_estimate(g: &mut Graph, fcrn: &Fcrn, p: &crate::autograd::BoundParams, utt: &PreparedUtterance) -> Var {
    let x = g.constant(utt.y_norm.clone());
    let mask = fcrn.forward(g, p, x);
    g.complex_mul_const(mask, utt.y.clone())
}

fn physical_node(g: &mut Graph, est: Var, k: usize) -> Var {
    g.narrow(est, 2, 0, k)
}

/// `J_total` for one utterance with the DNS bound as `dns` and the PESQNet
/// (if any) bound as constants. Weights of exactly 0 or 1 skip the unused
/// branch, which leaves the value unchanged.
pub fn dns_loss_node(
    g: &mut Graph,
    fcrn: &Fcrn,
    dns: &crate::autograd::BoundParams,
    pesqnet: Option<(&PesqNet, &crate::autograd::BoundParams)>,
    utt: &PreparedUtterance,
    w: LossWeights,
) -> Var {
    let est = dns_estimate(g, fcrn, dns, utt);
    let k = utt.s.shape()[2];
    let mse = (w.alpha > 0.0).then(|| {
        let phys = physical_node(g, est, k);
        losses::graph_loss_mse(g, phys, &utt.s, &utt.s_rev, w.beta)
    });
    let perceptual = (w.alpha < 1.0).then(|| {
        let (net, np) = pesqnet.expect("a PESQNet is required when alpha < 1");
        let amp = g.complex_abs(est);
        let score = net.forward(g, np, amp);
        losses::graph_loss_pesqnet(g, score)
    });
    match (mse, perceptual) {
        (Some(m), None) => m,
        (None, Some(p)) => g.reshape(p, &[1]),
        (Some(m), Some(p)) => losses::graph_loss_total(g, m, p, w.alpha),
        (None, None) => unreachable!("alpha is within [0, 1]"),
    }
}

/// Loss and DNS parameter gradients for one utterance.
pub fn dns_utterance_grads(
    fcrn: &Fcrn,
    pesqnet: Option<&PesqNet>,
    utt: &PreparedUtterance,
    w: LossWeights,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let dp = fcrn.params.bind(&mut g, true);
    let np = pesqnet.map(|n| n.params.bind(&mut g, false));
    let loss = dns_loss_node(&mut g, fcrn, &dp, pesqnet.zip(np.as_ref()), utt, w);
    let grads = g.backward(loss);
    (g.scalar(loss), dp.collect(&grads))
}

/// Loss and PESQNet gradients for one amplitude input `[1, 1, K, L]`.
pub fn pesqnet_utterance_grads(net: &PesqNet, amp: &Tensor, target: f64) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, true);
    let a = g.constant(amp.clone());
    let s = net.forward(&mut g, &p, a);
    let loss = losses::graph_loss_pesq(&mut g, s, target);
    let grads = g.backward(loss);
    (g.scalar(loss), p.collect(&grads))
}

/// Mean loss and mean gradient over a minibatch, in index order.
pub fn batch_mean<F>(indices: &[usize], mut per_item: F) -> (f64, Vec<Tensor>)
where
    F: FnMut(usize) -> (f64, Vec<Tensor>),
{
    let mut loss = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for &i in indices {
        let (l, g) = per_item(i);
        loss += l;
        match &mut sum {
            Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => sum = Some(g),
        }
    }
    let n = indices.len() as f64;
    (
        loss / n,
        sum.unwrap_or_default().into_iter().map(|t| t / n).collect(),
    )
}

pub fn check_finite(loss: f64, grads: &[Tensor], minibatch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            minibatch,
        });
    }
    if !super::optim::all_finite(grads) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            minibatch,
        });
    }
    Ok(())
}

/// Enhanced spectrum value for inference.
pub fn enhance_tensor(fcrn: &Fcrn, utt: &PreparedUtterance) -> Tensor {
    let mut g = Graph::new();
    let p = fcrn.params.bind(&mut g, false);
    let est = dns_estimate(&mut g, fcrn, &p, utt);
    g.value(est).clone()
}

/// `|S|` of a `[1, 2, K, L]` spectrum, as `[1, 1, K, L]`.
pub fn amplitude(est: &Tensor) -> Tensor {
    let re = est.index_axis(Axis(1), 0);
    let im = est.index_axis(Axis(1), 1);
    let mut out = ndarray::Zip::from(&re).and(&im).map_collect(|a, b| a.hypot(*b));
    out = out.insert_axis(Axis(1));
    out.into_dimensionality::<IxDyn>().unwrap()
}

pub fn spectrum_to_waveform(est: &Tensor, cfg: &StftConfig, len: usize) -> Result<Waveform> {
    let spec = ComplexSpectrogram {
        data: tensor_to_complex(est),
        cfg: cfg.clone(),
    };
    let mut w = istft_ola(&spec, cfg)?;
    w.samples.resize(len, 0.0);
    Ok(w)
}

pub fn pesqnet_score(net: &PesqNet, amp: &Tensor) -> f64 {
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let a = g.constant(amp.clone());
    let s = net.forward(&mut g, &p, a);
    g.scalar(s)
}

/// `J_mse` of an enhanced spectrum value against the utterance targets.
pub fn mse_value(est: &Tensor, utt: &PreparedUtterance, beta: f64) -> f64 {
    let k = utt.s.shape()[2];
    let phys = est.slice_axis(Axis(2), Slice::from(0..k));
    let n = (utt.s.len() / 2) as f64;
    let joint = (&phys - &utt.s).mapv(|x| x * x).sum() / n;
    let noise = (&phys - &utt.s_rev).mapv(|x| x * x).sum() / n;
    beta * joint + (1.0 - beta) * noise
}

/// DNS outputs for a whole set: enhanced amplitude and oracle score against
/// the dry clean reference, per utterance.
#[derive(Debug, Clone)]
pub struct EnhancedSet {
    pub estimates: Vec<Tensor>,
    pub amplitudes: Vec<Tensor>,
    pub oracle: Vec<f64>,
}

pub fn enhance_and_score(fcrn: &Fcrn, data: &Dataset, oracle: &dyn QualityOracle) -> Result<EnhancedSet> {
    let estimates: Vec<Tensor> = data.items.iter().map(|u| enhance_tensor(fcrn, u)).collect();
    let waves = estimates
        .iter()
        .zip(&data.items)
        .map(|(e, u)| spectrum_to_waveform(e, &data.stft, u.clean.len()))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Waveform, &Waveform)> = waves.iter().zip(data.items.iter().map(|u| &u.clean)).collect();
    let oracle = oracle.score_many(&pairs)?;
    Ok(EnhancedSet {
        amplitudes: estimates.iter().map(amplitude).collect(),
        estimates,
        oracle,
    })
}
