//! Synthetic stand-ins for speech and noise recordings, for runs without a corpus.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, SAMPLE_RATE};

const SPEECH_FLOOR: f64 = 1e-3;

/// Voiced syllables separated by pauses: a harmonic source with drifting
/// pitch shaped by two formant bumps, under a raised-cosine envelope.
pub fn speech_like(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut pos = rng.random_range(0..(len / 8).max(1));
    while pos < len {
        let dur = (rng.random_range(0.08..0.25) * fs) as usize;
        let f0 = rng.random_range(100.0..220.0);
        let drift = rng.random_range(-0.3..0.3);
        let f1 = rng.random_range(300.0..900.0);
        let f2 = rng.random_range(900.0..2500.0);
        let amp = rng.random_range(0.4..1.0);
        let n_harm = (4000.0 / f0) as usize;
        let gains: Vec<f64> = (1..=n_harm)
            .map(|h| {
                let f = h as f64 * f0;
                let bump = |c: f64, bw: f64| (-((f - c) / bw).powi(2)).exp();
                (bump(f1, 150.0) + 0.6 * bump(f2, 250.0) + 0.05) / h as f64
            })
            .collect();
        let mut phase = 0.0;
        for i in 0..dur.min(len - pos) {
            let t = i as f64 / dur as f64;
            let env = 0.5 - 0.5 * (TAU * t).cos();
            phase += TAU * f0 * (1.0 + drift * t) / fs;
            let v: f64 = gains
                .iter()
                .enumerate()
                .map(|(h, g)| g * ((h + 1) as f64 * phase).sin())
                .sum();
            out[pos + i] += amp * env * v;
        }
        pos += dur + (rng.random_range(0.03..0.2) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|x| *x *= 0.5 / peak);
    }
    // Recording floor, 54 dB below the peak: pauses are never digital silence.
    for x in &mut out {
        *x += SPEECH_FLOOR * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    }
    Waveform::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    /// First-order low-passed white noise.
    Brown,
    /// Mains hum harmonics over a white floor.
    Hum,
    /// White noise under a slow amplitude modulation.
    Fluctuating,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::White,
        NoiseKind::Brown,
        NoiseKind::Hum,
        NoiseKind::Fluctuating,
    ];
}

pub fn noise(kind: NoiseKind, len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut white = || -> f64 { StandardNormal.sample(&mut rng) };
    let samples: Vec<f64> = match kind {
        NoiseKind::White => (0..len).map(|_| 0.1 * white()).collect(),
        NoiseKind::Brown => {
            let mut y = 0.0;
            (0..len)
                .map(|_| {
                    y = 0.97 * y + 0.03 * white();
                    y
                })
                .collect()
        }
        NoiseKind::Hum => (0..len)
            .map(|n| {
                let t = n as f64 / fs;
                (1..=5)
                    .map(|h| 0.05 / h as f64 * (TAU * 50.0 * h as f64 * t).sin())
                    .sum::<f64>()
                    + 0.01 * white()
            })
            .collect(),
        NoiseKind::Fluctuating => (0..len)
            .map(|n| {
                let t = n as f64 / fs;
                0.1 * (0.6 + 0.4 * (TAU * 1.5 * t).sin()) * white()
            })
            .collect(),
    };
    Waveform::new(samples)
}
