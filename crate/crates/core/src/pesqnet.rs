//! PESQNet: a non-intrusive quality estimator mapping an amplitude
//! spectrogram to one score on the PESQ scale.

use ndarray::{Array2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BoundParams, Graph, Padding, ParamSet, RowStat, Tensor, Var};
use crate::error::{Error, Result};

pub const PESQ_MIN: f64 = 1.04;
pub const PESQ_MAX: f64 = 4.64;
const PESQ_SPAN: f64 = PESQ_MAX - PESQ_MIN;
const LOG_EPS: f64 = 1e-4;

/// How the BLSTM sees the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlstmMode {
    /// Each block's feature vector is a length-1 sequence; blocks never interact
    /// before the statistics, so the score is invariant to block order.
    PerBlock,
    /// One sequence running over the blocks in time order.
    AcrossBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PesqNetConfig {
    /// W: frames per block.
    pub block_frames: usize,
    pub kernel_widths: Vec<usize>,
    pub n_bins: usize,
    /// Channels of the two 3x3 encoder convolutions.
    pub encoder_channels: [usize; 2],
    /// Filters per multi-width kernel.
    pub width_filters: usize,
    pub blstm_hidden: usize,
    pub fc: Vec<usize>,
    pub blstm_mode: BlstmMode,
    /// Feed `1 + ln(|S| + 1e-4) / ln(1e4)` instead of raw amplitude: silence
    /// maps to 0 and unit amplitude to about 1.
    pub log_compress: bool,
    pub leaky_slope: f64,
}

impl Default for PesqNetConfig {
    fn default() -> Self {
        Self {
            block_frames: 16,
            kernel_widths: vec![1, 2, 4, 8],
            n_bins: 260,
            encoder_channels: [8, 16],
            width_filters: 16,
            blstm_hidden: 32,
            fc: vec![128, 32, 1],
            blstm_mode: BlstmMode::PerBlock,
            log_compress: false,
            leaky_slope: 0.2,
        }
    }
}

impl PesqNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.kernel_widths.is_empty() {
            errs.push("pesqnet.kernel_widths is empty".to_string());
        }
        for (i, &w) in self.kernel_widths.iter().enumerate() {
            if w != 1 << i {
                errs.push(format!("pesqnet.kernel_widths[{i}] = {w}, expected {}", 1 << i));
            }
        }
        let widest = self.kernel_widths.iter().copied().max().unwrap_or(1);
        if self.block_frames < widest {
            errs.push(format!(
                "pesqnet.block_frames = {} is narrower than kernel width {widest}",
                self.block_frames
            ));
        }
        if self.n_bins == 0 || self.n_bins % 4 != 0 {
            errs.push(format!("pesqnet.n_bins = {} is not divisible by 4", self.n_bins));
        }
        if self.encoder_channels.contains(&0) || self.width_filters == 0 || self.blstm_hidden == 0 {
            errs.push("pesqnet channel counts must be positive".to_string());
        }
        if self.fc.last() != Some(&1) || self.fc.contains(&0) {
            errs.push(format!("pesqnet.fc = {:?} must end in a single node", self.fc));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `3.6 * sigmoid(x) + 1.04`.
pub fn output_gate(x: f64) -> f64 {
    PESQ_SPAN * crate::autograd::sigmoid(x) + PESQ_MIN
}

/// Number of blocks and valid frames in each: `ceil(L / W)` blocks, the last
/// one padded with zeros.
pub fn block_layout(frames: usize, w: usize) -> Vec<usize> {
    let b = frames.div_ceil(w).max(1);
    (0..b).map(|i| (frames - i * w).min(w)).collect()
}

/// `L x K` amplitudes to `B` blocks of `K x W`, as `[B, 1, K, W]`.
pub fn split_blocks(amp: &Array2<f64>, w: usize) -> (Tensor, Vec<usize>) {
    let (l, k) = amp.dim();
    let valid = block_layout(l, w);
    let mut t = Tensor::zeros(IxDyn(&[valid.len(), 1, k, w]));
    for ((f, bin), &v) in amp.indexed_iter() {
        t[[f / w, 0, bin, f % w]] = v;
    }
    (t, valid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PesqNet {
    pub cfg: PesqNetConfig,
    pub params: ParamSet,
}

impl PesqNet {
    pub fn new(cfg: PesqNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [c1, c2] = cfg.encoder_channels;
        p.insert_scaled("enc1.w", &[c1, 1, 3, 3], 9, &mut rng);
        p.insert_filled("enc1.b", &[c1], 0.0);
        p.insert_scaled("enc2.w", &[c2, c1, 3, 3], c1 * 9, &mut rng);
        p.insert_filled("enc2.b", &[c2], 0.0);
        let h4 = cfg.n_bins / 4;
        for &w in &cfg.kernel_widths {
            p.insert_scaled(&format!("mw{w}.w"), &[cfg.width_filters, c2, h4, w], c2 * h4 * w, &mut rng);
            p.insert_filled(&format!("mw{w}.b"), &[cfg.width_filters], 0.0);
        }
        let d_in = cfg.width_filters * cfg.kernel_widths.len();
        let h = cfg.blstm_hidden;
        for dir in ["fw", "bw"] {
            p.insert_scaled(&format!("{dir}.wx"), &[d_in, 4 * h], d_in, &mut rng);
            p.insert_scaled(&format!("{dir}.wh"), &[h, 4 * h], h, &mut rng);
            let mut b = Tensor::zeros(IxDyn(&[4 * h]));
            b.slice_mut(ndarray::s![h..2 * h]).fill(1.0);
            p.insert(&format!("{dir}.b"), b);
        }
        let mut d = 4 * 2 * h;
        for (i, &n) in cfg.fc.iter().enumerate() {
            p.insert_scaled(&format!("fc{i}.w"), &[d, n], d, &mut rng);
            p.insert_filled(&format!("fc{i}.b"), &[n], 0.0);
            d = n;
        }
        Ok(Self { cfg, params: p })
    }

    fn lstm_step(&self, g: &mut Graph, p: &BoundParams, dir: &str, x: Var, state: Option<(Var, Var)>) -> (Var, Var) {
        let h = self.cfg.blstm_hidden;
        let mut z = g.matmul(x, p.var(&format!("{dir}.wx")));
        if let Some((hp, _)) = state {
            let zh = g.matmul(hp, p.var(&format!("{dir}.wh")));
            z = g.add(z, zh);
        }
        let z = g.add_row_bias(z, p.var(&format!("{dir}.b")));
        let i = g.narrow(z, 1, 0, h);
        let i = g.sigmoid(i);
        let f = g.narrow(z, 1, h, h);
        let f = g.sigmoid(f);
        let c_in = g.narrow(z, 1, 2 * h, h);
        let c_in = g.tanh(c_in);
        let o = g.narrow(z, 1, 3 * h, h);
        let o = g.sigmoid(o);
        let mut c = g.mul(i, c_in);
        if let Some((_, cp)) = state {
            let keep = g.mul(f, cp);
            c = g.add(c, keep);
        }
        let tc = g.tanh(c);
        (g.mul(o, tc), c)
    }

    /// BLSTM over block features `[B, D]`, giving `[B, 2h]`.
    fn blstm(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        match self.cfg.blstm_mode {
            BlstmMode::PerBlock => {
                let (hf, _) = self.lstm_step(g, p, "fw", x, None);
                let (hb, _) = self.lstm_step(g, p, "bw", x, None);
                g.concat(&[hf, hb], 1)
            }
            BlstmMode::AcrossBlocks => {
                let b = g.shape(x)[0];
                let rows: Vec<Var> = (0..b).map(|i| g.narrow(x, 0, i, 1)).collect();
                let mut fw = Vec::with_capacity(b);
                let mut st = None;
                for &r in &rows {
                    let s = self.lstm_step(g, p, "fw", r, st);
                    fw.push(s.0);
                    st = Some(s);
                }
                let mut bw = vec![fw[0]; b];
                let mut st = None;
                for i in (0..b).rev() {
                    let s = self.lstm_step(g, p, "bw", rows[i], st);
                    bw[i] = s.0;
                    st = Some(s);
                }
                let hf = g.concat(&fw, 0);
                let hb = g.concat(&bw, 0);
                g.concat(&[hf, hb], 1)
            }
        }
    }

    /// Score node `[1, 1]` for an amplitude spectrogram node `[1, 1, K, L]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, amp: Var) -> Var {
        let cfg = &self.cfg;
        let l = g.shape(amp)[3];
        let k = g.shape(amp)[2];
        let w = cfg.block_frames;
        let valid = block_layout(l, w);
        let mut blocks = Vec::with_capacity(valid.len());
        for (b, &v) in valid.iter().enumerate() {
            let mut blk = g.narrow(amp, 3, b * w, v);
            if v < w {
                let pad = g.constant(Tensor::zeros(IxDyn(&[1, 1, k, w - v])));
                blk = g.concat(&[blk, pad], 3);
            }
            blocks.push(blk);
        }
        let mut x = g.concat(&blocks, 0);
        if cfg.log_compress {
            x = g.log_eps(x, LOG_EPS);
            x = g.scale(x, -1.0 / LOG_EPS.ln());
            x = g.offset(x, 1.0);
        }
        let same = Padding::same(3, 3);
        let x = g.conv2d(x, p.var("enc1.w"), Some(p.var("enc1.b")), same);
        let x = g.leaky_relu(x, cfg.leaky_slope);
        let x = g.max_pool(x, 2, 1);
        let x = g.conv2d(x, p.var("enc2.w"), Some(p.var("enc2.b")), same);
        let x = g.leaky_relu(x, cfg.leaky_slope);
        let x = g.max_pool(x, 2, 1);
        let mut feats = Vec::with_capacity(cfg.kernel_widths.len());
        for &kw in &cfg.kernel_widths {
            let y = g.conv2d(
                x,
                p.var(&format!("mw{kw}.w")),
                Some(p.var(&format!("mw{kw}.b"))),
                Padding::NONE,
            );
            let y = g.leaky_relu(y, cfg.leaky_slope);
            // Windows that reach into padded frames are excluded.
            let lens: Vec<usize> = valid.iter().map(|&v| (v + 1).saturating_sub(kw).max(1)).collect();
            feats.push(g.masked_max_last(y, &lens));
        }
        let feat = g.concat(&feats, 1);
        let h = self.blstm(g, p, feat);
        let stats: Vec<Var> = [RowStat::Mean, RowStat::Std, RowStat::Min, RowStat::Max]
            .into_iter()
            .map(|s| g.row_stat(h, s))
            .collect();
        let mut z = g.concat(&stats, 1);
        let n_fc = cfg.fc.len();
        for i in 0..n_fc {
            z = g.matmul(z, p.var(&format!("fc{i}.w")));
            z = g.add_row_bias(z, p.var(&format!("fc{i}.b")));
            if i + 1 < n_fc {
                z = g.leaky_relu(z, cfg.leaky_slope);
            }
        }
        let s = g.sigmoid(z);
        let s = g.scale(s, PESQ_SPAN);
        g.offset(s, PESQ_MIN)
    }

    /// Score of an `L x K` amplitude spectrogram.
    pub fn estimate_pesq(&self, amp: &Array2<f64>) -> Result<f64> {
        let (l, k) = amp.dim();
        if l == 0 || k != self.cfg.n_bins {
            return Err(Error::Shape(format!(
                "amplitude spectrogram {l}x{k}, expected Lx{} with L>=1",
                self.cfg.n_bins
            )));
        }
        if amp.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "amplitudes must be finite and nonnegative".into(),
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let t = Tensor::from_shape_fn(IxDyn(&[1, 1, k, l]), |i| amp[[i[3], i[2]]]);
        let a = g.constant(t);
        let s = self.forward(&mut g, &p, a);
        Ok(g.scalar(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(mode: BlstmMode) -> PesqNetConfig {
        PesqNetConfig {
            block_frames: 8,
            kernel_widths: vec![1, 2, 4, 8],
            n_bins: 8,
            encoder_channels: [2, 3],
            width_filters: 2,
            blstm_hidden: 3,
            fc: vec![5, 1],
            blstm_mode: mode,
            log_compress: false,
            leaky_slope: 0.2,
        }
    }

    fn amp(l: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((l, 8), |_| rng.random_range(0.0..2.0))
    }

    #[test]
    fn gate_values() {
        assert_eq!(output_gate(0.0), 2.84);
        assert!((output_gate(3f64.ln()) - 3.74).abs() < 1e-12);
        assert_eq!(output_gate(1e3), PESQ_MAX);
        assert_eq!(output_gate(-1e3), PESQ_MIN);
    }

    #[test]
    fn block_arithmetic() {
        assert_eq!(block_layout(32, 16), vec![16, 16]);
        assert_eq!(block_layout(17, 16), vec![16, 1]);
        assert_eq!(block_layout(16, 16), vec![16]);
        let (t, v) = split_blocks(&amp(17, 0), 16);
        assert_eq!(t.shape(), &[2, 1, 8, 16]);
        assert_eq!(v, vec![16, 1]);
        assert!(t.slice(ndarray::s![1, 0, .., 1..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scores_in_range_for_any_length() {
        for mode in [BlstmMode::PerBlock, BlstmMode::AcrossBlocks] {
            let net = PesqNet::new(tiny(mode), 1).unwrap();
            for l in [1, 5, 8, 19] {
                let s = net.estimate_pesq(&(amp(l, l as u64) * 1e4)).unwrap();
                assert!((PESQ_MIN..=PESQ_MAX).contains(&s));
            }
        }
    }

    #[test]
    fn per_block_is_order_invariant() {
        let net = PesqNet::new(tiny(BlstmMode::PerBlock), 2).unwrap();
        let a = amp(24, 3);
        let mut b = a.clone();
        for f in 0..8 {
            for k in 0..8 {
                b[[f, k]] = a[[f + 16, k]];
                b[[f + 16, k]] = a[[f, k]];
            }
        }
        let (sa, sb) = (net.estimate_pesq(&a).unwrap(), net.estimate_pesq(&b).unwrap());
        assert!((sa - sb).abs() < 1e-12);
    }

    #[test]
    fn rejects_negative_and_bad_widths() {
        let net = PesqNet::new(tiny(BlstmMode::PerBlock), 0).unwrap();
        let mut a = amp(4, 0);
        a[[0, 0]] = -1.0;
        assert!(net.estimate_pesq(&a).is_err());
        let mut cfg = tiny(BlstmMode::PerBlock);
        cfg.kernel_widths = vec![1, 3];
        assert!(PesqNet::new(cfg, 0).is_err());
    }
}
