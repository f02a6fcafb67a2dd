//! Reference-free estimates for clean and noisy inputs, and one descent step
//! on the estimator loss that raises the estimate.

use dns_pesqnet::autograd::{Graph, Tensor};
use dns_pesqnet::desk::{tiny_pesqnet, DeskCorpus};
use dns_pesqnet::dsp::{stft, StftConfig};
use dns_pesqnet::losses::graph_loss_pesqnet;
use dns_pesqnet::pesqnet::PesqNet;
use ndarray::IxDyn;

fn main() -> dns_pesqnet::error::Result<()> {
    let cfg = StftConfig::default();
    let net = PesqNet::new(tiny_pesqnet(), 1)?;
    let r = DeskCorpus { utterances: 1, ..DeskCorpus::default() }.synthesize()?.remove(0);
    for (name, w) in [("clean", &r.clean), ("mixture", &r.mixture)] {
        let amp = stft(w, &cfg)?.amplitude();
        println!("{name:8} estimate {:.4}", net.estimate_pesq(&amp)?);
    }

    let amp = stft(&r.mixture, &cfg)?.amplitude();
    let (l, k) = amp.dim();
    let amp = Tensor::from_shape_fn(IxDyn(&[1, 1, k, l]), |i| amp[[i[3], i[2]]]);
    let score = |a: &Tensor| {
        let mut g = Graph::new();
        let p = net.params.bind(&mut g, false);
        let x = g.constant(a.clone());
        let s = net.forward(&mut g, &p, x);
        g.scalar(s)
    };
    let mut g = Graph::new();
    let p = net.params.bind(&mut g, false);
    let x = g.input_with_grad(amp.clone());
    let s = net.forward(&mut g, &p, x);
    let loss = graph_loss_pesqnet(&mut g, s);
    let grad = g.backward(loss).get(x).unwrap().clone();
    let step = 1e-3 / grad.mapv(|v| v * v).sum().sqrt();
    let moved = &amp - &(grad * step);
    println!("one input step: {:.6} -> {:.6}", score(&amp), score(&moved));
    Ok(())
}
