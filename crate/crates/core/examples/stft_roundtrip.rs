//! Analysis and overlap-add resynthesis of a synthetic utterance.

use dns_pesqnet::dsp::{istft_ola, stft, StftConfig};
use dns_pesqnet::fcrn::enhance_identity;
use dns_pesqnet::synth::signals::speech_like;

fn main() -> dns_pesqnet::error::Result<()> {
    let cfg = StftConfig::default();
    let x = speech_like(16_000, 3);
    let spec = stft(&x, &cfg)?;
    println!(
        "{} samples -> {} frames x {} bins ({} physical)",
        x.len(),
        spec.frames(),
        spec.bins(),
        cfg.physical_bins()
    );

    let y = istft_ola(&spec, &cfg)?;
    let edge = cfg.frame_len / 2;
    let interior = edge..y.len() - edge;
    let err = interior.clone().map(|n| (y.samples[n] - x.samples[n]).abs()).fold(0.0, f64::max);
    println!("interior reconstruction error {err:.2e} over {} samples", interior.len());

    // Edge padding keeps every sample, including the unframed tail.
    let z = enhance_identity(&x, &cfg)?;
    let err = z.samples.iter().zip(&x.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("full-length identity error {err:.2e}");
    Ok(())
}
