//! Image-source room response and its effect on a dry signal.

use dns_pesqnet::dsp::SAMPLE_RATE;
use dns_pesqnet::synth::signals::speech_like;
use dns_pesqnet::synth::{reverberate, simulate_rir, RoomSpec, SPEED_OF_SOUND};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dns_pesqnet::error::Result<()> {
    let room = RoomSpec {
        length: 6.0,
        width: 4.5,
        height: 3.0,
        absorption: 0.35,
        source: [1.5, 2.0, 1.6],
        mic: [4.2, 2.5, 1.2],
        max_image_order: 6,
    };
    let rir = simulate_rir(&room, SAMPLE_RATE, SPEED_OF_SOUND, Some(8000))?;
    let direct = room.direct_distance() / SPEED_OF_SOUND * SAMPLE_RATE as f64;
    let peak = rir
        .samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map_or(0, |(i, _)| i);
    println!("rir: {} taps, peak at {peak} (direct path {direct:.1})", rir.len());

    let dry = speech_like(16_000, 1);
    let wet = reverberate(&dry, &rir)?;
    println!("dry power {:.3e}, reverberant power {:.3e}", dry.power(), wet.power());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let r = RoomSpec::sample(&mut rng, 4);
        println!("sampled room {:.1?} m, absorption {:.2}", r.dims(), r.absorption);
    }
    Ok(())
}
