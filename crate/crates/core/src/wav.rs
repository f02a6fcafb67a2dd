//! 16-bit PCM mono WAV at 16 kHz. Anything else is rejected.

use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM_SCALE: f64 = 32768.0;

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let reject = |reason: String| Error::AudioFormat {
        path: path.to_path_buf(),
        reason,
    };
    if spec.channels != 1 {
        return Err(reject(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(reject(format!(
            "{} Hz, expected {} Hz (no resampling)",
            spec.sample_rate, SAMPLE_RATE
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(reject(format!(
            "{:?} {}-bit samples, expected 16-bit PCM",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples))
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::AudioFormat {
            path: path.as_ref().to_path_buf(),
            reason: format!("refusing to write {} Hz audio", w.sample_rate),
        });
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &x in &w.samples {
        writer.write_sample(to_pcm16(x))?;
    }
    writer.finalize()?;
    Ok(())
}

fn to_pcm16(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Rounds every sample onto the 16-bit PCM grid (with clipping).
///
/// Sums and differences of on-grid values are exact in `f64`, which is what
/// keeps the stored mixture decomposition sample-exact.
pub fn quantize_pcm16(w: &Waveform) -> Waveform {
    Waveform {
        samples: w
            .samples
            .iter()
            .map(|&x| to_pcm16(x) as f64 / PCM_SCALE)
            .collect(),
        sample_rate: w.sample_rate,
    }
}

pub fn is_on_pcm16_grid(x: f64) -> bool {
    let v = x * PCM_SCALE;
    v.fract() == 0.0 && v >= i16::MIN as f64 && v <= i16::MAX as f64
}
