use ndarray::{Axis, Slice};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::fcrn::{spec_to_tensor, NormStats};
use crate::synth::UtteranceRecord;

/// Everything the training loops need from one record, precomputed.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    /// Noisy spectrum `[1, 2, K_in, L]`.
    pub y: Tensor,
    /// Normalized network input, same shape.
    pub y_norm: Tensor,
    /// Dry clean target over the physical bins `[1, 2, K, L]`.
    pub s: Tensor,
    /// Reverberant clean target over the physical bins.
    pub s_rev: Tensor,
    pub clean: Waveform,
    pub mixture: Waveform,
    pub reverberant: bool,
}

impl PreparedUtterance {
    pub fn frames(&self) -> usize {
        self.y.shape()[3]
    }
}

fn physical(t: Tensor, k: usize) -> Tensor {
    t.slice_axis(Axis(2), Slice::from(0..k)).to_owned()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<PreparedUtterance>,
    pub stft: StftConfig,
}

impl Dataset {
    pub fn prepare(records: &[UtteranceRecord], stats: &NormStats, cfg: &StftConfig) -> Result<Self> {
        let k = cfg.physical_bins();
        let items = records
            .iter()
            .map(|r| {
                let ys = stft(&r.mixture, cfg)?;
                Ok(PreparedUtterance {
                    id: r.id.clone(),
                    y_norm: stats.normalize(&ys)?,
                    y: spec_to_tensor(&ys),
                    s: physical(spec_to_tensor(&stft(&r.clean, cfg)?), k),
                    s_rev: physical(spec_to_tensor(&stft(&r.reverberated_clean, cfg)?), k),
                    clean: r.clean.clone(),
                    mixture: r.mixture.clone(),
                    reverberant: r.is_reverberant(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            items,
            stft: cfg.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.items.is_empty() {
            Err(Error::Empty(format!("{what} set")))
        } else {
            Ok(())
        }
    }
}

/// Normalization statistics over the noisy inputs of `records`.
pub fn norm_stats_for(records: &[UtteranceRecord], cfg: &StftConfig) -> Result<NormStats> {
    let specs = records
        .iter()
        .map(|r| stft(&r.mixture, cfg))
        .collect::<Result<Vec<_>>>()?;
    NormStats::compute(&specs.iter().collect::<Vec<_>>())
}

/// Keeps the first records for training and the last `ceil(n * fraction)`
/// (at least one) for validation.
pub fn split_train_val(records: Vec<UtteranceRecord>, val_fraction: f64) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_fraction}")));
    }
    if records.len() < 2 {
        return Err(Error::Empty(format!("corpus of {} records cannot be split", records.len())));
    }
    let n_val = ((records.len() as f64 * val_fraction).ceil() as usize).clamp(1, records.len() - 1);
    let mut train = records;
    let val = train.split_off(train.len() - n_val);
    Ok((train, val))
}

/// Minibatch index lists for one epoch; the order depends only on
/// `(seed, epoch)`, which makes resumed runs replay the same batches.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_everything_once() {
        let b = minibatches(10, 3, 1, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, minibatches(10, 3, 1, 4));
        assert_ne!(b, minibatches(10, 3, 1, 5));
    }
}
