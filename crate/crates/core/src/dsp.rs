//! Time/frequency conversion shared by every other module.
//!
//! Frames are windowed with a periodic Hann window, zero-padded to the FFT
//! size and transformed; only the one-sided half (DC..Nyquist) is kept and
//! padded with zero bins up to the model input width. Synthesis is
//! weighted overlap-add normalized by the summed squared window.

use ndarray::{s, Array2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Floor applied to the overlap-add window envelope.
const ENVELOPE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Mean square over all samples.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn check_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return invalid(format!(
                "sample rate {} Hz, pipeline requires {} Hz",
                self.sample_rate, SAMPLE_RATE
            ));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return invalid(format!("non-finite sample at index {i}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    /// Model-facing bin count; physical bins beyond `fft_size / 2 + 1` are zero.
    pub n_bins: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            frame_len: 384,
            hop: 192,
            fft_size: 512,
            n_bins: 260,
        }
    }
}

impl StftConfig {
    pub fn physical_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop * 2 != self.frame_len {
            return invalid(format!(
                "hop {} must be half of frame length {}",
                self.hop, self.frame_len
            ));
        }
        if self.fft_size < self.frame_len {
            return invalid(format!(
                "fft size {} smaller than frame length {}",
                self.fft_size, self.frame_len
            ));
        }
        if self.n_bins < self.physical_bins() {
            return invalid(format!(
                "{} model bins cannot hold {} physical bins",
                self.n_bins,
                self.physical_bins()
            ));
        }
        Ok(())
    }

    /// Periodic Hann window of `frame_len` taps.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect()
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.hop
        }
    }

    /// Samples covered by `frames` frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    /// frames x bins
    pub data: Array2<Complex64>,
    pub cfg: StftConfig,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn zeros(frames: usize, cfg: StftConfig) -> Self {
        Self {
            data: Array2::zeros((frames, cfg.n_bins)),
            cfg,
        }
    }

    /// |X| as a frames x bins real matrix.
    pub fn amplitude(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.data.dim() != other.data.dim() {
            return shape_err(format!(
                "spectrogram {:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            ));
        }
        Ok(())
    }

    /// Elementwise complex product.
    pub fn mul_elementwise(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            data: &self.data * &other.data,
            cfg: self.cfg,
        })
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let frames = cfg.num_frames(w.len());
    if frames == 0 {
        return Err(Error::SignalTooShort {
            len: w.len(),
            needed: cfg.frame_len,
        });
    }
    let window = cfg.window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let phys = cfg.physical_bins();
    let mut out = Array2::<Complex64>::zeros((frames, phys));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for l in 0..frames {
        let start = l * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, (b, x)) in buf
            .iter_mut()
            .zip(&w.samples[start..start + cfg.frame_len])
            .enumerate()
        {
            *b = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf[..phys].iter().enumerate() {
            out[[l, k]] = *v;
        }
    }
    let data = pad_bins(&out, cfg.n_bins)?;
    Ok(ComplexSpectrogram { data, cfg: *cfg })
}

pub fn istft_ola(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    if spec.cfg != *cfg {
        return shape_err("spectrogram was produced with a different STFT configuration");
    }
    if spec.bins() != cfg.n_bins {
        return shape_err(format!("{} bins, expected {}", spec.bins(), cfg.n_bins));
    }
    let frames = spec.frames();
    if frames == 0 {
        return shape_err("spectrogram has no frames");
    }
    let phys = drop_bins(&spec.data, cfg.physical_bins())?;
    let window = cfg.window();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_size);
    let len = cfg.covered_len(frames);
    let mut acc = vec![0.0; len];
    let mut env = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let n = cfg.fft_size;
    let scale = 1.0 / n as f64;
    for l in 0..frames {
        for k in 0..phys.ncols() {
            buf[k] = phys[[l, k]];
        }
        for k in 1..n - phys.ncols() + 1 {
            buf[n - k] = phys[[l, k]].conj();
        }
        ifft.process(&mut buf);
        let start = l * cfg.hop;
        for i in 0..cfg.frame_len {
            acc[start + i] += buf[i].re * scale * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let samples = acc
        .iter()
        .zip(&env)
        .map(|(a, e)| a / e.max(ENVELOPE_FLOOR))
        .collect();
    Ok(Waveform::new(samples))
}

/// Appends zero-valued bins so every frame has `n_bins` columns.
pub fn pad_bins(phys: &Array2<Complex64>, n_bins: usize) -> Result<Array2<Complex64>> {
    if phys.ncols() > n_bins {
        return shape_err(format!(
            "{} physical bins exceed {} padded bins",
            phys.ncols(),
            n_bins
        ));
    }
    let mut out = Array2::zeros((phys.nrows(), n_bins));
    out.slice_mut(s![.., ..phys.ncols()]).assign(phys);
    Ok(out)
}

/// Inverse of [`pad_bins`]: keeps the first `physical` bins.
pub fn drop_bins(padded: &Array2<Complex64>, physical: usize) -> Result<Array2<Complex64>> {
    if padded.ncols() < physical {
        return shape_err(format!(
            "{} bins, need at least {}",
            padded.ncols(),
            physical
        ));
    }
    Ok(padded.slice(s![.., ..physical]).to_owned())
}
