//! Synthesizes a small mixed corpus, writes it as WAV files and reloads it.

use dns_pesqnet::desk::DeskCorpus;
use dns_pesqnet::synth::{corpus_digest, load_corpus, measure_snr, write_corpus};

fn main() -> dns_pesqnet::error::Result<()> {
    let spec = DeskCorpus {
        utterances: 8,
        reverb_fraction: 0.5,
        ..DeskCorpus::default()
    };
    let records = spec.synthesize()?;
    for r in &records {
        let snr = measure_snr(&r.reverberated_clean, &r.noise)?;
        println!(
            "{} target {:5.2} dB measured {:5.2} dB rir {:?}",
            r.id, r.snr_db, snr, r.rir_id
        );
    }

    let dir = tempfile::tempdir()?;
    write_corpus(&records, dir.path())?;
    let back = load_corpus(dir.path())?;
    println!("digest {}", corpus_digest(&records));
    println!("digest after reload {}", corpus_digest(&back));
    Ok(())
}
