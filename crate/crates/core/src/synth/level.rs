use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::wav::quantize_pcm16;

/// 32 ms at 16 kHz.
pub const LEVEL_FRAME: usize = 512;
/// Frames within this many dB of the loudest frame count as active.
pub const ACTIVE_RANGE_DB: f64 = 35.0;

const SILENCE_POWER: f64 = 1e-20;

/// Mean-square power over the active frames of `w`.
pub fn active_power(w: &Waveform) -> Result<f64> {
    let energies: Vec<(f64, usize)> = w
        .samples
        .chunks(LEVEL_FRAME)
        .map(|c| (c.iter().map(|x| x * x).sum::<f64>(), c.len()))
        .collect();
    let peak = energies
        .iter()
        .map(|(e, n)| e / *n as f64)
        .fold(0.0, f64::max);
    if peak <= SILENCE_POWER {
        return Err(Error::Silent("no active frames".into()));
    }
    let floor = peak * 10f64.powf(-ACTIVE_RANGE_DB / 10.0);
    let (e, n) = energies
        .iter()
        .filter(|(e, n)| e / *n as f64 >= floor)
        .fold((0.0, 0usize), |(se, sn), (e, n)| (se + e, sn + n));
    Ok(e / n as f64)
}

/// Active level in dBov, where a full-scale RMS of 1.0 is 0 dBov.
pub fn active_level_dbov(w: &Waveform) -> Result<f64> {
    Ok(10.0 * active_power(w)?.log10())
}

/// Pure rescaling so the active level equals `target_dbov`.
pub fn normalize_level(w: &Waveform, target_dbov: f64) -> Result<Waveform> {
    let level = active_level_dbov(w)?;
    Ok(w.scaled(10f64.powf((target_dbov - level) / 20.0)))
}

/// Active speech power over full noise power, in dB.
pub fn measure_snr(speech: &Waveform, noise: &Waveform) -> Result<f64> {
    let pn = noise.power();
    if pn <= SILENCE_POWER {
        return Err(Error::Silent("noise has zero power".into()));
    }
    Ok(10.0 * (active_power(speech)? / pn).log10())
}

/// Scales `noise` to `snr_db` against `speech` and returns `(mixture, scaled_noise)`.
///
/// The scaled noise is rounded onto the 16-bit PCM grid. When `speech` is on
/// that grid too, `mixture - scaled_noise == speech` holds bit-exactly.
pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform)> {
    if speech.len() != noise.len() {
        return Err(Error::Shape(format!(
            "speech has {} samples, noise {}",
            speech.len(),
            noise.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db = {snr_db}")));
    }
    let pn = noise.power();
    if pn <= SILENCE_POWER {
        return Err(Error::Silent("noise has zero power".into()));
    }
    let ps = active_power(speech)?;
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled = quantize_pcm16(&noise.scaled(gain));
    let mixture = Waveform {
        samples: speech
            .samples
            .iter()
            .zip(&scaled.samples)
            .map(|(s, n)| s + n)
            .collect(),
        sample_rate: speech.sample_rate,
    };
    Ok((mixture, scaled))
}
