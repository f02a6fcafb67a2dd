//! The built-in surrogate scorer, and the adapter for an external tool.

use std::time::Duration;

use dns_pesqnet::desk::DeskCorpus;
use dns_pesqnet::dsp::Waveform;
use dns_pesqnet::oracle::{surrogate_from_lsd, ExternalPesq, QualityOracle, SurrogateOracle};
use dns_pesqnet::synth::signals::{noise, NoiseKind};

fn main() -> dns_pesqnet::error::Result<()> {
    let oracle = SurrogateOracle::default();
    let r = DeskCorpus { utterances: 1, ..DeskCorpus::default() }.synthesize()?.remove(0);
    println!("lsd 0 -> {:.3}, lsd 1 -> {:.3}", surrogate_from_lsd(0.0), surrogate_from_lsd(1.0));
    let n = noise(NoiseKind::White, r.clean.len(), 9);
    for eps in [0.0, 0.003, 0.01, 0.03, 0.1] {
        let x = Waveform::new(r.clean.samples.iter().zip(&n.samples).map(|(s, d)| s + eps * d).collect());
        println!("clean + {eps} x noise: {:.3}", oracle.score(&x, &r.clean)?);
    }
    println!("mixture: {:.3}", oracle.score(&r.mixture, &r.clean)?);

    // The score is the last number printed; {ref} and {deg} become WAV paths.
    let external = ExternalPesq::new("echo MOS-LQO {ref} {deg} = 3.10", None, Duration::from_secs(5), 2)?;
    let pairs = vec![(&r.mixture, &r.clean); 3];
    println!("external: {:?}", external.score_many(&pairs)?);
    Ok(())
}
