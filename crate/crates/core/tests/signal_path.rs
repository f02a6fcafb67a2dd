use dns_pesqnet::desk::DeskCorpus;
use dns_pesqnet::fcrn::enhance_identity;
use dns_pesqnet::dsp::{drop_bins, istft_ola, pad_bins, stft, StftConfig, Waveform};
use dns_pesqnet::synth::{corpus_digest, load_corpus, measure_snr, write_corpus};
use num_complex::Complex64;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_signal(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Max interior error over max interior magnitude.
fn interior_error(x: &Waveform, cfg: &StftConfig) -> f64 {
    let y = istft_ola(&stft(x, cfg).unwrap(), cfg).unwrap();
    let edge = cfg.frame_len / 2;
    let end = y.len().min(x.len()) - edge;
    let mut err: f64 = 0.0;
    let mut mag: f64 = 0.0;
    for n in edge..end {
        err = err.max((y.samples[n] - x.samples[n]).abs());
        mag = mag.max(x.samples[n].abs());
    }
    err / mag
}

#[test]
fn fifty_random_signals_reconstruct() {
    let cfg = StftConfig::default();
    for seed in 0..50 {
        let len = 2 * cfg.frame_len + (seed as usize * 97) % 4000;
        let e = interior_error(&random_signal(len, seed), &cfg);
        assert!(e <= 1e-6, "seed {seed}: relative error {e}");
    }
}

#[test]
fn every_stored_mixture_is_speech_plus_noise() {
    let records = DeskCorpus {
        utterances: 12,
        reverb_fraction: 0.5,
        ..DeskCorpus::default()
    }
    .synthesize()
    .unwrap();
    assert_eq!(records.iter().filter(|r| r.is_reverberant()).count(), 6);
    for r in &records {
        for ((y, s), d) in r.mixture.samples.iter().zip(&r.reverberated_clean.samples).zip(&r.noise.samples) {
            assert_eq!(*y, s + d, "{}", r.id);
        }
        let snr = measure_snr(&r.reverberated_clean, &r.noise).unwrap();
        assert!((snr - r.snr_db).abs() <= 0.1, "{}: {snr} vs {}", r.id, r.snr_db);
    }
}

#[test]
fn corpus_survives_wav_roundtrip() {
    let records = DeskCorpus {
        utterances: 4,
        reverb_fraction: 0.5,
        ..DeskCorpus::default()
    }
    .synthesize()
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&records, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back, records);
    assert_eq!(corpus_digest(&back), corpus_digest(&records));
}

#[test]
fn synthesis_is_reproducible() {
    let spec = DeskCorpus {
        utterances: 6,
        reverb_fraction: 0.5,
        ..DeskCorpus::default()
    };
    assert_eq!(
        corpus_digest(&spec.synthesize().unwrap()),
        corpus_digest(&spec.synthesize().unwrap())
    );
    let other = DeskCorpus { seed: 8, ..spec };
    assert_ne!(
        corpus_digest(&other.synthesize().unwrap()),
        corpus_digest(&DeskCorpus { seed: 7, ..other.clone() }.synthesize().unwrap())
    );
}

fn complex_frame() -> impl Strategy<Value = Array2<Complex64>> {
    (1usize..4, proptest::collection::vec(-1e3f64..1e3, 2 * 257 * 3)).prop_map(|(l, v)| {
        Array2::from_shape_fn((l, 257), |(i, k)| Complex64::new(v[2 * (i * 257 + k)], v[2 * (i * 257 + k) + 1]))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pad_then_drop_is_bit_exact(x in complex_frame()) {
        let padded = pad_bins(&x, 260).unwrap();
        prop_assert_eq!(padded.ncols(), 260);
        prop_assert!(padded.slice(ndarray::s![.., 257..]).iter().all(|c| *c == Complex64::new(0.0, 0.0)));
        prop_assert_eq!(drop_bins(&padded, 257).unwrap(), x);
    }

    #[test]
    fn stft_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = StftConfig::default();
        let x = random_signal(1500, seed);
        let y = random_signal(1500, seed + 1);
        let mix = Waveform::new(x.samples.iter().zip(&y.samples).map(|(p, q)| a * p + b * q).collect());
        let lhs = stft(&mix, &cfg).unwrap();
        let (sx, sy) = (stft(&x, &cfg).unwrap(), stft(&y, &cfg).unwrap());
        for ((l, p), q) in lhs.data.iter().zip(sx.data.iter()).zip(sy.data.iter()) {
            prop_assert!((l - (p * a + q * b)).norm() < 1e-9);
        }
    }

    #[test]
    fn reconstruction_holds_for_any_length(len in 768usize..3000, seed in 0u64..1000) {
        let cfg = StftConfig::default();
        prop_assert!(interior_error(&random_signal(len, seed), &cfg) <= 1e-6);
    }

    #[test]
    fn identity_enhancement_keeps_every_sample(len in 1usize..2500, seed in 0u64..1000) {
        let cfg = StftConfig::default();
        let x = random_signal(len, seed);
        let y = enhance_identity(&x, &cfg).unwrap();
        prop_assert_eq!(y.len(), len);
        for (a, b) in x.samples.iter().zip(&y.samples) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
