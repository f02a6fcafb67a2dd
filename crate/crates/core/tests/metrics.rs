use dns_pesqnet::dsp::Waveform;
use dns_pesqnet::eval::{
    curves_export, curves_import, delta_snr_seg, lcc, mae, scatter_export, scatter_import, segmental_snr, MetricReport,
    MetricRow, SCATTER_HEADER,
};
use dns_pesqnet::training::CurvePoint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn wave(v: Vec<f64>) -> Waveform {
    Waveform::new(v)
}

/// Independent frame loop: explicit frame count, per-frame energy ratio.
fn snr_seg_oracle(clean: &[f64], x: &[f64]) -> f64 {
    let frames = (clean.len() - 256) / 128 + 1;
    let mut vals = Vec::new();
    for f in 0..frames {
        let mut e = 0.0;
        let mut d = 0.0;
        for i in f * 128..f * 128 + 256 {
            e += clean[i] * clean[i];
            d += (clean[i] - x[i]).powi(2);
        }
        if e < 1e-10 {
            continue;
        }
        let snr = if d == 0.0 { 35.0 } else { 10.0 * (e / d).log10() };
        vals.push(snr.max(-10.0).min(35.0));
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn identity_enhancement_has_zero_gain() {
    let clean = noise(4000, 0.5, 1);
    let noisy: Vec<f64> = clean.iter().zip(noise(4000, 0.2, 2)).map(|(a, b)| a + b).collect();
    let d = delta_snr_seg(&wave(clean), &wave(noisy.clone()), &wave(noisy)).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn perfect_enhancement_clamps_at_the_ceiling() {
    let clean = noise(3000, 0.5, 3);
    let noisy: Vec<f64> = clean.iter().zip(noise(3000, 0.3, 4)).map(|(a, b)| a + b).collect();
    let d = delta_snr_seg(&wave(clean.clone()), &wave(noisy.clone()), &wave(clean.clone())).unwrap();
    assert!((d - (35.0 - snr_seg_oracle(&clean, &noisy))).abs() < 1e-12);
}

#[test]
fn two_frame_case_by_hand() {
    let clean = vec![1.0; 384];
    let x: Vec<f64> = (0..384).map(|i| if i < 128 { 0.9 } else { 0.99 }).collect();
    // Frame 0: e = 256, d = 128 * 0.01 + 128 * 1e-4. Frame 1: SNR 40 dB, clamped.
    let expected = (10.0 * (256.0f64 / 1.2928).log10() + 35.0) / 2.0;
    let got = segmental_snr(&wave(clean.clone()), &wave(x.clone())).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    assert!((got - snr_seg_oracle(&clean, &x)).abs() < 1e-12);
}

#[test]
fn segmental_snr_matches_frame_loop_with_silent_frames() {
    let mut clean = noise(5000, 0.5, 5);
    clean[1000..2000].iter_mut().for_each(|v| *v = 0.0);
    let x: Vec<f64> = clean.iter().zip(noise(5000, 0.1, 6)).map(|(a, b)| a + b).collect();
    let got = segmental_snr(&wave(clean.clone()), &wave(x.clone())).unwrap();
    assert!((got - snr_seg_oracle(&clean, &x)).abs() < 1e-12);
}

#[test]
fn invalid_segmental_inputs_are_rejected() {
    let a = wave(vec![0.1; 1000]);
    assert!(segmental_snr(&a, &wave(vec![0.1; 999])).is_err());
    assert!(segmental_snr(&wave(vec![0.0; 1000]), &a).is_err());
    assert!(delta_snr_seg(&a, &a, &wave(vec![0.0; 10])).is_err());
}

#[test]
fn mae_and_lcc_match_textbook_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(1.0..4.6)).collect();
        let yh: Vec<f64> = y.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let pairs: Vec<(f64, f64)> = yh.iter().copied().zip(y.iter().copied()).collect();
        let m: f64 = yh.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 10.0;
        assert!((mae(&pairs).unwrap() - m).abs() <= 1e-12);
        assert!((lcc(&pairs).unwrap() - pearson(&yh, &y)).abs() <= 1e-12);
    }
}

#[test]
fn degenerate_pairs() {
    let same = [(2.0, 2.0), (2.0, 2.0), (2.0, 2.0)];
    assert_eq!(mae(&same).unwrap(), 0.0);
    assert!(lcc(&same).is_err());
    assert!(lcc(&[(1.0, 2.0)]).is_err());
    assert!(mae(&[]).is_err());
    let affine: Vec<(f64, f64)> = [1.0, 2.0, 3.0].iter().map(|y| (2.0 * y + 3.0, *y)).collect();
    assert!((lcc(&affine).unwrap() - 1.0).abs() < 1e-15);
}

fn row(id: &str, condition: &str, t: f64, h: f64, d: Option<f64>) -> MetricRow {
    MetricRow {
        id: id.into(),
        condition: condition.into(),
        pesq_true: t,
        pesq_hat: h,
        delta_snr_seg: d,
    }
}

fn fixture_report() -> MetricReport {
    MetricReport {
        rows: vec![
            row("utt0000", "noisy/dry", 1.5, 1.625, None),
            row("utt0000", "enhanced/dry", 2.25, 2.125, Some(4.5)),
            row("utt0001", "enhanced/reverb", 1.75, 2.0, None),
        ],
    }
}

#[test]
fn empty_report_exports_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scatter.csv");
    scatter_export(&MetricReport::default(), &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{}\n", SCATTER_HEADER.join(",")));
    assert!(scatter_import(&p).unwrap().rows.is_empty());
    let c = dir.path().join("curves.csv");
    curves_export(&[], &c).unwrap();
    assert!(curves_import(&c).unwrap().is_empty());
}

#[test]
fn exports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scatter.csv");
    let mut report = fixture_report();
    report.rows[0].pesq_hat = 0.1 + 0.2;
    scatter_export(&report, &p).unwrap();
    assert_eq!(scatter_import(&p).unwrap(), report);
    let curves: Vec<CurvePoint> = (0..4)
        .map(|t| CurvePoint {
            tau: t,
            j_total: 1.0 / (t as f64 + 3.0),
            mae: 0.1 * t as f64,
            mean_oracle_score: 1.04 + t as f64 / 7.0,
        })
        .collect();
    let c = dir.path().join("curves.csv");
    curves_export(&curves, &c).unwrap();
    assert_eq!(curves_import(&c).unwrap(), curves);
}

#[test]
fn scatter_fixture_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scatter.csv");
    scatter_export(&fixture_report(), &p).unwrap();
    let golden = include_str!("fixtures/scatter_3rows.csv");
    assert_eq!(std::fs::read_to_string(&p).unwrap(), golden);
}

#[test]
fn aggregates_recompute_from_rows() {
    let a = fixture_report().aggregate();
    assert_eq!(a.rows, 3);
    assert!((a.mae.unwrap() - (0.125 + 0.125 + 0.25) / 3.0).abs() < 1e-15);
    assert_eq!(a.mean_delta_snr_seg, Some(4.5));
    assert_eq!(fixture_report().filter("enhanced").rows.len(), 2);
}

proptest! {
    #[test]
    fn delta_is_gain_invariant(seed in 0u64..1000, gain in 0.1f64..10.0) {
        let clean = noise(2048, 0.5, seed);
        let noisy: Vec<f64> = clean.iter().zip(noise(2048, 0.3, seed + 1)).map(|(a, b)| a + b).collect();
        let enh: Vec<f64> = clean.iter().zip(noise(2048, 0.1, seed + 2)).map(|(a, b)| a + b).collect();
        let base = delta_snr_seg(&wave(clean.clone()), &wave(noisy.clone()), &wave(enh.clone())).unwrap();
        let s = |v: &[f64]| wave(v.iter().map(|x| x * gain).collect());
        let scaled = delta_snr_seg(&s(&clean), &s(&noisy), &s(&enh)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn lcc_is_affine_invariant(seed in 0u64..1000, a in 0.01f64..100.0, b in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(f64, f64)> = (0..12).map(|_| (rng.random_range(1.0..4.6), rng.random_range(1.0..4.6))).collect();
        let moved: Vec<(f64, f64)> = pairs.iter().map(|(h, y)| (*h, a * y + b)).collect();
        prop_assert!((lcc(&pairs).unwrap() - lcc(&moved).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mae_triangle(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<[f64; 3]> = (0..8).map(|_| [rng.random_range(1.0..4.6), rng.random_range(1.0..4.6), rng.random_range(1.0..4.6)]).collect();
        let m = |i: usize, j: usize| mae(&t.iter().map(|r| (r[i], r[j])).collect::<Vec<_>>()).unwrap();
        prop_assert!(m(0, 2) <= m(0, 1) + m(1, 2) + 1e-12);
    }
}
