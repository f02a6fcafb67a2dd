//! FCRN denoiser: a frequency-axis convolutional encoder-decoder with a
//! ConvLSTM bottleneck, emitting a magnitude-bounded complex mask.

use ndarray::{Array2, Axis, IxDyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BoundParams, Graph, Padding, ParamSet, Tensor, Var};
use crate::dsp::{istft_ola, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Two 2x1 max-pool stages in the encoder, mirrored by two upsamplings.
pub const POOL_STAGES: usize = 2;
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcrnConfig {
    /// F: base number of filter kernels; the wide layers use 2F.
    pub filters: usize,
    /// N: kernel height along frequency.
    pub kernel_height: usize,
    /// K_in: frequency bins at the input.
    pub n_bins: usize,
    pub leaky_slope: f64,
}

impl Default for FcrnConfig {
    fn default() -> Self {
        Self {
            filters: 88,
            kernel_height: 24,
            n_bins: 260,
            leaky_slope: 0.2,
        }
    }
}

impl FcrnConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.filters == 0 {
            errs.push("fcrn.filters must be positive".to_string());
        }
        if self.kernel_height == 0 {
            errs.push("fcrn.kernel_height must be positive".to_string());
        }
        let div = 1 << POOL_STAGES;
        if self.n_bins == 0 || self.n_bins % div != 0 {
            errs.push(format!("fcrn.n_bins = {} is not divisible by {div}", self.n_bins));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            errs.push(format!("fcrn.leaky_slope = {} outside [0, 1)", self.leaky_slope));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Per-(channel, bin) normalization statistics. Channel 0 is the real part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub n_bins: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_bins: usize) -> Self {
        Self {
            n_bins,
            mean: vec![0.0; 2 * n_bins],
            std: vec![1.0; 2 * n_bins],
        }
    }

    /// Mean and population std over every frame of every spectrogram.
    pub fn compute(specs: &[&ComplexSpectrogram]) -> Result<Self> {
        let first = specs.first().ok_or_else(|| Error::Empty("corpus".into()))?;
        let k = first.bins();
        let mut sum = vec![0.0; 2 * k];
        let mut frames = 0usize;
        for s in specs {
            if s.bins() != k {
                return Err(Error::Shape(format!("{} bins, expected {k}", s.bins())));
            }
            for row in s.data.rows() {
                for (j, z) in row.iter().enumerate() {
                    sum[j] += z.re;
                    sum[k + j] += z.im;
                }
            }
            frames += s.frames();
        }
        let n = frames as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let mut sq = vec![0.0; 2 * k];
        for s in specs {
            for row in s.data.rows() {
                for (j, z) in row.iter().enumerate() {
                    sq[j] += (z.re - mean[j]).powi(2);
                    sq[k + j] += (z.im - mean[k + j]).powi(2);
                }
            }
        }
        let std = sq.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { n_bins: k, mean, std })
    }

    /// Normalized network input `[1, 2, K, L]`.
    pub fn normalize(&self, spec: &ComplexSpectrogram) -> Result<Tensor> {
        if spec.bins() != self.n_bins {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, statistics {}",
                spec.bins(),
                self.n_bins
            )));
        }
        let mut t = spec_to_tensor(spec);
        let k = self.n_bins;
        for c in 0..2 {
            for j in 0..k {
                let (m, s) = (self.mean[c * k + j], self.std[c * k + j]);
                t.index_axis_mut(Axis(0), 0)
                    .index_axis_mut(Axis(0), c)
                    .index_axis_mut(Axis(0), j)
                    .mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(t)
    }
}

/// `L x K` spectrogram as a `[1, 2, K, L]` tensor (real, imag channels).
pub fn spec_to_tensor(spec: &ComplexSpectrogram) -> Tensor {
    complex_to_tensor(&spec.data)
}

pub fn complex_to_tensor(data: &Array2<Complex64>) -> Tensor {
    let (l, k) = data.dim();
    let mut t = Tensor::zeros(IxDyn(&[1, 2, k, l]));
    for ((f, b), z) in data.indexed_iter() {
        t[[0, 0, b, f]] = z.re;
        t[[0, 1, b, f]] = z.im;
    }
    t
}

pub fn tensor_to_complex(t: &Tensor) -> Array2<Complex64> {
    let (k, l) = (t.shape()[2], t.shape()[3]);
    Array2::from_shape_fn((l, k), |(f, b)| Complex64::new(t[[0, 0, b, f]], t[[0, 1, b, f]]))
}

/// Complex mask with `|M| <= 1` everywhere, `L x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub data: Array2<Complex64>,
}

impl ComplexMask {
    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

pub fn apply_mask(mask: &ComplexMask, y: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    if mask.data.dim() != y.data.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs spectrogram {:?}",
            mask.data.dim(),
            y.data.dim()
        )));
    }
    Ok(ComplexSpectrogram {
        data: &mask.data * &y.data,
        cfg: y.cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fcrn {
    pub cfg: FcrnConfig,
    pub params: ParamSet,
}

// (name, input channels as multiple of F, output channels as multiple of F)
const CONVS: [(&str, usize, usize); 10] = [
    ("enc1a", 0, 1),
    ("enc1b", 1, 1),
    ("enc2a", 1, 2),
    ("enc2b", 2, 2),
    ("enc3", 2, 2),
    ("dec3", 1, 2),
    ("dec2a", 2, 2),
    ("dec2b", 2, 2),
    ("dec1a", 2, 1),
    ("dec1b", 1, 1),
];

impl Fcrn {
    /// Deterministic initialization for a fixed seed.
    pub fn new(cfg: FcrnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, n) = (cfg.filters, cfg.kernel_height);
        let mut p = ParamSet::new();
        for (name, cin, cout) in CONVS {
            let cin = if cin == 0 { 2 } else { cin * f };
            p.insert_scaled(&format!("{name}.w"), &[cout * f, cin, n, 1], cin * n, &mut rng);
            p.insert_filled(&format!("{name}.b"), &[cout * f], 0.0);
        }
        p.insert_scaled("lstm.wx", &[4 * f, 2 * f, n, 1], 2 * f * n, &mut rng);
        p.insert_scaled("lstm.wh", &[4 * f, f, n, 1], f * n, &mut rng);
        let mut bias = Tensor::zeros(IxDyn(&[4 * f]));
        bias.slice_mut(ndarray::s![f..2 * f]).fill(1.0);
        p.insert("lstm.b", bias);
        p.insert_scaled("out.w", &[2, f, n, 1], f * n, &mut rng);
        p.insert_filled("out.b", &[2], 0.0);
        Ok(Self { cfg, params: p })
    }

    fn conv(&self, g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
        let pad = Padding::same(self.cfg.kernel_height, 1);
        g.conv2d(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))), pad)
    }

    fn act(&self, g: &mut Graph, x: Var) -> Var {
        g.leaky_relu(x, self.cfg.leaky_slope)
    }

    fn conv_act(&self, g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Var {
        let y = self.conv(g, p, name, x);
        self.act(g, y)
    }

    /// ConvLSTM over the time axis of `x [1, C, H, L]`, zero initial state.
    fn conv_lstm(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let f = self.cfg.filters;
        let pad = Padding::same(self.cfg.kernel_height, 1);
        let frames = g.shape(x)[3];
        let zx = g.conv2d(x, p.var("lstm.wx"), Some(p.var("lstm.b")), pad);
        let mut state: Option<(Var, Var)> = None;
        let mut outs = Vec::with_capacity(frames);
        for t in 0..frames {
            let mut z = g.narrow(zx, 3, t, 1);
            if let Some((h, _)) = state {
                let zh = g.conv2d(h, p.var("lstm.wh"), None, pad);
                z = g.add(z, zh);
            }
            let i = g.narrow(z, 1, 0, f);
            let i = g.sigmoid(i);
            let fg = g.narrow(z, 1, f, f);
            let fg = g.sigmoid(fg);
            let c_in = g.narrow(z, 1, 2 * f, f);
            let c_in = g.tanh(c_in);
            let o = g.narrow(z, 1, 3 * f, f);
            let o = g.sigmoid(o);
            let mut c = g.mul(i, c_in);
            if let Some((_, c_prev)) = state {
                let keep = g.mul(fg, c_prev);
                c = g.add(c, keep);
            }
            let tc = g.tanh(c);
            let h = g.mul(o, tc);
            outs.push(h);
            state = Some((h, c));
        }
        g.concat(&outs, 3)
    }

    /// Mask `[1, 2, K, L]` for a normalized input `[1, 2, K, L]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, y_norm: Var) -> Var {
        let a1 = self.conv_act(g, p, "enc1a", y_norm);
        let a2 = self.conv_act(g, p, "enc1b", a1);
        let b0 = g.max_pool(a2, 2, 1);
        let b1 = self.conv_act(g, p, "enc2a", b0);
        let b2 = self.conv_act(g, p, "enc2b", b1);
        let c0 = g.max_pool(b2, 2, 1);
        let c1 = self.conv_act(g, p, "enc3", c0);
        let h = self.conv_lstm(g, p, c1);
        let d3 = self.conv_act(g, p, "dec3", h);
        let d3 = g.add(d3, c1);
        let u2 = g.upsample(d3, 2, 1);
        let d2 = self.conv_act(g, p, "dec2a", u2);
        let d2 = g.add(d2, b2);
        let d2 = self.conv_act(g, p, "dec2b", d2);
        let u1 = g.upsample(d2, 2, 1);
        let d1 = self.conv_act(g, p, "dec1a", u1);
        let d1 = g.add(d1, a2);
        let d1 = self.conv_act(g, p, "dec1b", d1);
        let z = self.conv(g, p, "out", d1);
        g.bound_complex(z)
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 2 || s[2] != self.cfg.n_bins || s[3] == 0 {
            return Err(Error::Shape(format!(
                "FCRN input {:?}, expected [1, 2, {}, L>=1]",
                s, self.cfg.n_bins
            )));
        }
        Ok(())
    }

    /// Inference on a normalized `[1, 2, K, L]` input.
    pub fn mask_tensor(&self, y_norm: &Tensor) -> Result<Tensor> {
        self.check_input(y_norm)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(y_norm.clone());
        let m = self.forward(&mut g, &p, x);
        Ok(g.value(m).clone())
    }

    pub fn forward_mask(&self, y_norm: &Tensor) -> Result<ComplexMask> {
        Ok(ComplexMask {
            data: tensor_to_complex(&self.mask_tensor(y_norm)?),
        })
    }

    pub fn enhance_spectrogram(&self, stats: &NormStats, y: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        let mask = self.forward_mask(&stats.normalize(y)?)?;
        apply_mask(&mask, y)
    }
}

/// Zero-pads `y` so that every original sample lies where two frames
/// overlap; returns the padded signal and the offset of the first sample.
fn edge_padded(y: &Waveform, cfg: &StftConfig) -> (Waveform, usize) {
    let front = cfg.hop;
    let covered = front + y.len() + cfg.hop;
    let back = cfg.hop + (cfg.hop - covered.saturating_sub(cfg.frame_len) % cfg.hop) % cfg.hop;
    let mut samples = vec![0.0; front];
    samples.extend_from_slice(&y.samples);
    samples.resize(front + y.len() + back, 0.0);
    (Waveform { samples, sample_rate: y.sample_rate }, front)
}

fn cropped(w: Waveform, offset: usize, len: usize) -> Waveform {
    Waveform {
        samples: w.samples[offset..offset + len].to_vec(),
        sample_rate: w.sample_rate,
    }
}

/// Analysis, masking and overlap-add synthesis over an edge-padded copy of
/// `y`; the output has the input's length.
pub fn enhance_utterance(model: &Fcrn, stats: &NormStats, y: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
    let (padded, offset) = edge_padded(y, cfg);
    let out = model.enhance_spectrogram(stats, &stft(&padded, cfg)?)?;
    Ok(cropped(istft_ola(&out, cfg)?, offset, y.len()))
}

/// The same pipeline with the mask forced to 1.
pub fn enhance_identity(y: &Waveform, cfg: &StftConfig) -> Result<Waveform> {
    let (padded, offset) = edge_padded(y, cfg);
    Ok(cropped(istft_ola(&stft(&padded, cfg)?, cfg)?, offset, y.len()))
}
