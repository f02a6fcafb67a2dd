use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Shoebox room with one omnidirectional source and microphone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub absorption: f64,
    pub source: [f64; 3],
    pub mic: [f64; 3],
    pub max_image_order: usize,
}

impl RoomSpec {
    pub fn dims(&self) -> [f64; 3] {
        [self.length, self.width, self.height]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidArgument(format!("room dimensions {dims:?}")));
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "absorption {} outside (0, 1]",
                self.absorption
            )));
        }
        for (name, p) in [("source", self.source), ("mic", self.mic)] {
            if (0..3).any(|i| !(p[i] > 0.0 && p[i] < dims[i])) {
                return Err(Error::InvalidArgument(format!(
                    "{name} {p:?} not strictly inside room {dims:?}"
                )));
            }
        }
        if distance(self.source, self.mic) < 1e-9 {
            return Err(Error::InvalidArgument("source and mic coincide".into()));
        }
        Ok(())
    }

    /// Draws a room: L, W in [3, 10] m, H in [2.5, 3.5] m, absorption in
    /// [0.1, 0.3], mic at the centre and source 0.1 to 1 m away in a uniformly
    /// random direction, clipped to stay inside the walls.
    pub fn sample<R: Rng>(rng: &mut R, max_image_order: usize) -> Self {
        let length = rng.random_range(3.0..=10.0);
        let width = rng.random_range(3.0..=10.0);
        let height = rng.random_range(2.5..=3.5);
        let absorption = rng.random_range(0.1..=0.3);
        let mic = [length / 2.0, width / 2.0, height / 2.0];
        let r: f64 = rng.random_range(0.1..=1.0);
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - z * z).sqrt();
        let dir = [rho * phi.cos(), rho * phi.sin(), z];
        let dims = [length, width, height];
        let margin = 0.05;
        let mut source = [0.0; 3];
        for i in 0..3 {
            source[i] = (mic[i] + r * dir[i]).clamp(margin, dims[i] - margin);
        }
        Self {
            length,
            width,
            height,
            absorption,
            source,
            mic,
            max_image_order,
        }
    }

    pub fn direct_distance(&self) -> f64 {
        distance(self.source, self.mic)
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Image-source impulse response with frequency-independent walls.
///
/// Each image contributes `beta^bounces / d` at sample `round(d / c * fs)`,
/// with `beta = sqrt(1 - absorption)`. `max_taps` truncates long tails.
pub fn simulate_rir(room: &RoomSpec, sample_rate: u32, c: f64, max_taps: Option<usize>) -> Result<Waveform> {
    room.validate()?;
    let beta = (1.0 - room.absorption).sqrt();
    let dims = room.dims();
    let order = room.max_image_order as i64;
    let fs = sample_rate as f64;
    let mut taps: Vec<(usize, f64)> = Vec::new();
    for nx in -order..=order {
        for ny in -order..=order {
            for nz in -order..=order {
                for q in 0..8u8 {
                    let n = [nx, ny, nz];
                    let mut bounces = 0i64;
                    let mut img = [0.0; 3];
                    for i in 0..3 {
                        let qi = ((q >> i) & 1) as i64;
                        img[i] = (1 - 2 * qi) as f64 * room.source[i] + 2.0 * n[i] as f64 * dims[i];
                        bounces += (n[i] - qi).abs() + n[i].abs();
                    }
                    if bounces > order {
                        continue;
                    }
                    let d = distance(img, room.mic);
                    let idx = (d / c * fs).round() as usize;
                    if max_taps.is_some_and(|m| idx >= m) {
                        continue;
                    }
                    taps.push((idx, beta.powi(bounces as i32) / d));
                }
            }
        }
    }
    let len = taps.iter().map(|(i, _)| i + 1).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::InvalidArgument("tap cap removes the direct path".into()));
    }
    let mut h = vec![0.0; len];
    for (i, a) in taps {
        h[i] += a;
    }
    Ok(Waveform {
        samples: h,
        sample_rate,
    })
}

/// Linear convolution truncated to the speech length. Samples before the
/// first nonzero tap are dropped so the direct path lands at time zero.
pub fn reverberate(speech: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if speech.is_empty() || rir.is_empty() {
        return Err(Error::Empty("signal or impulse response".into()));
    }
    let Some(start) = rir.samples.iter().position(|&h| h != 0.0) else {
        return Err(Error::InvalidArgument("impulse response is all zero".into()));
    };
    let n = speech.len();
    let mut out = vec![0.0; n];
    for (k, &h) in rir.samples[start..].iter().enumerate() {
        if h == 0.0 || k >= n {
            continue;
        }
        for (o, x) in out[k..].iter_mut().zip(&speech.samples) {
            *o += h * x;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: speech.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn room(order: usize, absorption: f64) -> RoomSpec {
        RoomSpec {
            length: 6.0,
            width: 5.0,
            height: 3.0,
            absorption,
            source: [1.0, 1.5, 1.2],
            mic: [4.43, 1.5, 1.2],
            max_image_order: order,
        }
    }

    #[test]
    fn order_zero_is_one_tap() {
        let h = simulate_rir(&room(0, 0.2), 16_000, SPEED_OF_SOUND, None).unwrap();
        // 3.43 m at 343 m/s is 10 ms, i.e. 160 samples.
        assert_eq!(h.len(), 161);
        let nz: Vec<_> = h.samples.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(nz[0].0, 160);
        assert_abs_diff_eq!(*nz[0].1, 1.0 / 3.43, epsilon = 1e-12);
    }

    #[test]
    fn more_absorption_less_tail() {
        let tail = |a| {
            let h = simulate_rir(&room(4, a), 16_000, SPEED_OF_SOUND, None).unwrap();
            h.samples[161..].iter().map(|x| x * x).sum::<f64>()
        };
        assert!(tail(0.3) < tail(0.1));
    }

    #[test]
    fn coincident_source_and_mic_rejected() {
        let mut r = room(1, 0.2);
        r.mic = r.source;
        assert!(simulate_rir(&r, 16_000, SPEED_OF_SOUND, None).is_err());
    }

    #[test]
    fn reverberate_matches_direct_sum() {
        let x = Waveform::new((0..10).map(|i| (i as f64 * 0.7).cos()).collect());
        let h = Waveform::new(vec![0.0, 0.0, 1.0, 0.0, -0.4]);
        let y = reverberate(&x, &h).unwrap();
        for n in 0..10 {
            let mut acc = 0.0;
            for (k, hk) in [(0usize, 1.0), (2, -0.4)] {
                if n >= k {
                    acc += hk * x.samples[n - k];
                }
            }
            assert_abs_diff_eq!(y.samples[n], acc, epsilon = 1e-15);
        }
    }

    #[test]
    fn reverberate_identity_and_scaling() {
        let x = Waveform::new(vec![0.1, -0.2, 0.3]);
        assert_eq!(reverberate(&x, &Waveform::new(vec![1.0])).unwrap(), x);
        assert_eq!(reverberate(&x, &Waveform::new(vec![0.5])).unwrap(), x.scaled(0.5));
    }

    #[test]
    fn sampled_rooms_are_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = RoomSpec::sample(&mut rng, 2);
            r.validate().unwrap();
            assert!(r.direct_distance() <= 1.0 + 1e-12);
            assert!((0.1..=0.3).contains(&r.absorption));
        }
    }
}
