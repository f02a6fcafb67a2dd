//! Bounded complex mask of an untrained FCRN applied to a noisy mixture.

use dns_pesqnet::desk::{tiny_fcrn, DeskCorpus};
use dns_pesqnet::dsp::{stft, StftConfig};
use dns_pesqnet::fcrn::{enhance_utterance, Fcrn, NormStats};

fn main() -> dns_pesqnet::error::Result<()> {
    let cfg = StftConfig::default();
    let record = DeskCorpus { utterances: 1, ..DeskCorpus::default() }.synthesize()?.remove(0);
    let spec = stft(&record.mixture, &cfg)?;
    let stats = NormStats::compute(&[&spec])?;

    let model = Fcrn::new(tiny_fcrn(), 0)?;
    println!("tiny FCRN: {} parameters", model.params.num_scalars());
    let mask = model.forward_mask(&stats.normalize(&spec)?)?;
    println!("max mask magnitude {:.4}", mask.max_magnitude());

    let enhanced = enhance_utterance(&model, &stats, &record.mixture, &cfg)?;
    println!(
        "{} samples in, {} out; power {:.3e} -> {:.3e}",
        record.mixture.len(),
        enhanced.len(),
        record.mixture.power(),
        enhanced.power()
    );
    Ok(())
}
