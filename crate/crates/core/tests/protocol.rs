use std::sync::Mutex;

use dns_pesqnet::autograd::{Graph, Tensor};
use dns_pesqnet::desk::{tiny_fcrn, tiny_pesqnet, DeskCorpus};
use dns_pesqnet::dsp::Waveform;
use dns_pesqnet::error::Result;
use dns_pesqnet::fcrn::Fcrn;
use dns_pesqnet::oracle::{QualityOracle, SurrogateOracle};
use dns_pesqnet::pesqnet::PesqNet;
use dns_pesqnet::training::{
    dns_loss_node, enhance_tensor, finetune_stage1, finetune_stage2, minibatches, mse_value, norm_stats_for,
    pesqnet_eval, pretrain_dns, pretrain_pesqnet, spectrum_to_waveform, split_train_val, ActiveModel, Alternation,
    Dataset, DnsObjective, GradAccumulator, PesqTargets, PhaseConfig, PhaseState, Stage2Config, Trainer,
};
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, seed: u64, reverb_fraction: f64) -> (Dataset, Dataset) {
    let recs = DeskCorpus {
        utterances: n,
        seconds: 0.3,
        seed,
        reverb_fraction,
        ..Default::default()
    }
    .synthesize()
    .unwrap();
    let cfg = dns_pesqnet::dsp::StftConfig::default();
    let (tr, va) = split_train_val(recs, 0.25).unwrap();
    let stats = norm_stats_for(&tr, &cfg).unwrap();
    (Dataset::prepare(&tr, &stats, &cfg).unwrap(), Dataset::prepare(&va, &stats, &cfg).unwrap())
}

fn models() -> (Fcrn, PesqNet) {
    (Fcrn::new(tiny_fcrn(), 11).unwrap(), PesqNet::new(tiny_pesqnet(), 12).unwrap())
}

fn phase(lr: f64, epochs: usize) -> PhaseConfig {
    PhaseConfig {
        lr,
        stop_lr: lr / 100.0,
        max_epochs: Some(epochs),
        ..PhaseConfig::pretrain_dns()
    }
}

fn stage2(epochs: usize, alpha: f64) -> Stage2Config {
    Stage2Config {
        alpha,
        dns_lr: 1e-3,
        pesqnet_lr: 1e-3,
        epochs,
        ..Stage2Config::default()
    }
}

fn rel(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut d, mut n) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        d += (x - y).mapv(|v| v * v).sum();
        n += y.mapv(|v| v * v).sum();
    }
    (d / n).sqrt()
}

/// Records every (enhanced, reference) pair it scores.
struct LoggingOracle {
    inner: SurrogateOracle,
    log: Mutex<Vec<Vec<f64>>>,
}

impl QualityOracle for LoggingOracle {
    fn score(&self, enhanced: &Waveform, reference: &Waveform) -> Result<f64> {
        self.log.lock().unwrap().push(enhanced.samples.clone());
        self.inner.score(enhanced, reference)
    }
}

fn enhanced_waves(dns: &Fcrn, data: &Dataset) -> Vec<Vec<f64>> {
    data.items
        .iter()
        .map(|u| spectrum_to_waveform(&enhance_tensor(dns, u), &data.stft, u.clean.len()).unwrap().samples)
        .collect()
}

#[test]
fn twenty_five_epochs_follow_the_alternation() {
    let (train, val) = corpus(8, 1, 0.5);
    let (dns, net) = models();
    let cfg = Stage2Config {
        track_minibatch_hashes: true,
        ..stage2(25, 0.0)
    };
    let out = finetune_stage2(dns, net, &train, &val, &SurrogateOracle::default(), cfg).unwrap();
    let r = &out.report;
    let per_epoch = minibatches(train.len(), 3, 0, 1).len();
    assert_eq!(r.dns_updates, 13);
    assert_eq!(r.pesqnet_updates, 12 * per_epoch);
    assert_eq!(r.curves.len(), 26);
    assert!(r.epochs.iter().all(|e| e.active == ActiveModel::for_epoch(e.tau)));
    for tau in 1..=25 {
        let ev: Vec<_> = r.hashes.iter().filter(|h| h.tau == tau).collect();
        assert_eq!(ev.len(), 2 + per_epoch);
        let first = ev[0];
        for h in &ev {
            match ActiveModel::for_epoch(tau) {
                ActiveModel::Dns => assert_eq!(h.pesqnet, first.pesqnet, "tau {tau}"),
                ActiveModel::Pesqnet => assert_eq!(h.dns, first.dns, "tau {tau}"),
            }
        }
        let last = ev.last().unwrap();
        match ActiveModel::for_epoch(tau) {
            ActiveModel::Dns => assert_ne!(last.dns, first.dns, "tau {tau}"),
            ActiveModel::Pesqnet => assert_ne!(last.pesqnet, first.pesqnet, "tau {tau}"),
        }
    }
    // Inside a DNS epoch nothing moves until the single averaged update.
    let mid: Vec<_> = r.hashes.iter().filter(|h| h.tau == 1 && h.minibatch.is_some()).collect();
    assert!(mid.iter().all(|h| h.dns == r.hashes[0].dns));
}

#[test]
fn accumulated_update_equals_epoch_mean_gradient() {
    let (train, val) = corpus(16, 2, 0.5);
    assert_eq!(train.len(), 12);
    let (dns, net) = models();
    let cfg = stage2(1, 0.3);
    assert_eq!(minibatches(train.len(), cfg.batch_size, cfg.seed, 1).len(), 4);
    let oracle = SurrogateOracle::default();
    let mut a = Alternation::new(dns.clone(), net.clone(), &train, &val, &oracle, cfg.clone()).unwrap();
    a.step_epoch().unwrap();
    let applied = a.last_dns_gradient().unwrap().to_vec();

    let mut g = Graph::new();
    let dp = dns.params.bind(&mut g, true);
    let np = net.params.bind(&mut g, false);
    let mut total = None;
    for u in &train.items {
        let l = dns_loss_node(&mut g, &dns, &dp, Some((&net, &np)), u, cfg.weights());
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    let mean = g.scale(total.unwrap(), 1.0 / train.len() as f64);
    let oracle_grad = dp.collect(&g.backward(mean));
    let e = rel(&applied, &oracle_grad);
    assert!(e <= 1e-6, "relative difference {e}");
}

#[test]
fn dns_epoch_is_order_invariant() {
    let (train, val) = corpus(16, 2, 0.0);
    let (dns, net) = models();
    let oracle = SurrogateOracle::default();
    let grad = |seed| {
        let mut a = Alternation::new(dns.clone(), net.clone(), &train, &val, &oracle, Stage2Config { seed, ..stage2(1, 0.0) }).unwrap();
        a.step_epoch().unwrap();
        a.last_dns_gradient().unwrap().to_vec()
    };
    assert!(rel(&grad(1), &grad(2)) <= 1e-12);
}

#[test]
fn reruns_are_bit_identical() {
    let (train, val) = corpus(8, 3, 0.5);
    let oracle = SurrogateOracle::default();
    let run = || {
        let (dns, net) = models();
        finetune_stage2(dns, net, &train, &val, &oracle, stage2(4, 0.5)).unwrap().report
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for (x, y) in a.curves.iter().zip(&b.curves) {
        assert_eq!(x.j_total.to_bits(), y.j_total.to_bits());
    }
}

#[test]
fn placebo_run_optimizes_plain_mse() {
    let (train, val) = corpus(8, 4, 0.5);
    let (dns, net) = models();
    let oracle = SurrogateOracle::default();
    let cfg = stage2(5, 1.0);
    let mut a = Alternation::new(dns, net, &train, &val, &oracle, cfg.clone()).unwrap();
    while !a.finished() {
        let before = a.dns().clone();
        let e = a.step_epoch().unwrap().clone();
        if e.active == ActiveModel::Dns {
            let batches = minibatches(train.len(), cfg.batch_size, cfg.seed, e.tau);
            let direct = batches
                .iter()
                .map(|b| b.iter().map(|&i| mse_value(&enhance_tensor(&before, &train.items[i]), &train.items[i], cfg.beta)).sum::<f64>() / b.len() as f64)
                .sum::<f64>()
                / batches.len() as f64;
            assert!((e.loss - direct).abs() <= 1e-12 * direct.abs(), "tau {}: {} vs {direct}", e.tau, e.loss);
        }
    }
    let last = a.report().curves.last().unwrap();
    let direct = train.items.iter().map(|x| mse_value(&enhance_tensor(a.dns(), x), x, cfg.beta)).sum::<f64>() / train.len() as f64;
    assert!((last.j_total - direct).abs() <= 1e-12 * direct);
}

#[test]
fn pretraining_smoke() {
    let (train, val) = corpus(16, 5, 0.0);
    let (dns0, net0) = models();
    let (dns, hist) = pretrain_dns(dns0.clone(), &train, &val, phase(1e-3, 5)).unwrap();
    let start = DnsObjective { model: dns0, train: &train, val: &val, beta: 0.0 };
    let start_loss = train.items.iter().map(|u| mse_value(&enhance_tensor(&start.model, u), u, 0.0)).sum::<f64>() / train.len() as f64;
    assert_eq!(hist.len(), 5);
    assert!(hist[4].train_loss < start_loss, "{} vs {start_loss}", hist[4].train_loss);

    let digest = dns.params.digest();
    let oracle = SurrogateOracle::default();
    let vt = PesqTargets::from_dns(&dns, &val, &oracle).unwrap();
    let (_, mae0) = pesqnet_eval(&net0, &vt);
    let (net, _) = pretrain_pesqnet(net0, &dns, &train, &val, &oracle, phase(2e-3, 8)).unwrap();
    let (_, mae1) = pesqnet_eval(&net, &vt);
    assert!(mae1 < mae0, "{mae1} vs {mae0}");
    assert_eq!(dns.params.digest(), digest);
}

#[test]
fn dns_pretraining_rejects_reverberant_data() {
    let (train, val) = corpus(8, 6, 1.0);
    assert!(pretrain_dns(models().0, &train, &val, phase(1e-3, 1)).is_err());
}

#[test]
fn pesqnet_targets_come_from_the_frozen_dns() {
    let (train, val) = corpus(8, 7, 0.0);
    let (dns, net) = models();
    let oracle = LoggingOracle { inner: SurrogateOracle::default(), log: Mutex::new(Vec::new()) };
    pretrain_pesqnet(net, &dns, &train, &val, &oracle, phase(1e-3, 1)).unwrap();
    let log = oracle.log.lock().unwrap().clone();
    let mut expected = enhanced_waves(&dns, &train);
    expected.extend(enhanced_waves(&dns, &val));
    assert_eq!(log, expected);
    assert!(train.items.iter().all(|u| !log.contains(&u.mixture.samples)));
}

#[test]
fn stage1_pesqnet_sees_the_adapted_dns() {
    let (train, val) = corpus(8, 8, 0.5);
    let (dns, net) = models();
    let oracle = LoggingOracle { inner: SurrogateOracle::default(), log: Mutex::new(Vec::new()) };
    let out = finetune_stage1(dns.clone(), net, &train, &val, &oracle, 0.9, phase(1e-3, 2), phase(1e-3, 1)).unwrap();
    assert_ne!(out.dns.params.digest(), dns.params.digest());
    let log = oracle.log.lock().unwrap().clone();
    let mut expected = enhanced_waves(&out.dns, &train);
    expected.extend(enhanced_waves(&out.dns, &val));
    assert_eq!(log, expected);
}

#[test]
fn dry_corpus_makes_both_targets_coincide() {
    let (train, _) = corpus(8, 9, 0.0);
    let dns = models().0;
    for u in &train.items {
        assert_eq!(u.s, u.s_rev);
        let est = enhance_tensor(&dns, u);
        let plain = mse_value(&est, u, 1.0);
        // Identical targets; the weighted sum differs from either term only by rounding.
        assert!((mse_value(&est, u, 0.9) - plain).abs() <= 4.0 * f64::EPSILON * plain);
        assert_eq!(mse_value(&est, u, 0.0), plain);
    }
}

#[test]
fn resumed_phase_reproduces_the_trajectory() {
    let (train, val) = corpus(8, 10, 0.5);
    let dns = models().0;
    let cfg = phase(1e-3, 4);
    let obj = |m: Fcrn| DnsObjective { model: m, train: &train, val: &val, beta: 0.9 };
    let mut full = Trainer::new(obj(dns.clone()), cfg.clone()).unwrap();
    full.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::new(obj(dns), cfg.clone()).unwrap();
    first.run_epoch().unwrap();
    first.run_epoch().unwrap();
    let state: PhaseState = serde_json::from_str(&serde_json::to_string(&first.state()).unwrap()).unwrap();
    let model = first.objective.model.clone();
    let mut resumed = Trainer::resume(obj(model), cfg, state).unwrap();
    resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(resumed.history().len(), 4);
    for (a, b) in full.history().iter().zip(resumed.history()).skip(2) {
        assert!((a.train_loss - b.train_loss).abs() <= 1e-6 * a.train_loss.abs());
        assert!((a.val_loss - b.val_loss).abs() <= 1e-6 * a.val_loss.abs());
    }
}

#[test]
fn stage2_snapshot_resume_matches_uninterrupted_run() {
    let (train, val) = corpus(8, 11, 0.5);
    let (dns, net) = models();
    let oracle = SurrogateOracle::default();
    let cfg = stage2(5, 0.5);
    let full = finetune_stage2(dns.clone(), net.clone(), &train, &val, &oracle, cfg.clone()).unwrap();
    let mut a = Alternation::new(dns.clone(), net.clone(), &train, &val, &oracle, cfg.clone()).unwrap();
    a.step_epoch().unwrap();
    a.step_epoch().unwrap();
    a.step_epoch().unwrap();
    let snap = serde_json::from_str(&serde_json::to_string(&a.snapshot()).unwrap()).unwrap();
    drop(a);
    let mut b = Alternation::resume(snap, dns, net, &train, &val, &oracle, cfg).unwrap();
    while !b.finished() {
        b.step_epoch().unwrap();
    }
    let out = b.into_outcome();
    assert_eq!(out.report, full.report);
    assert_eq!(out.final_dns.params.digest(), full.final_dns.params.digest());
    assert_eq!(out.pesqnet.params.digest(), full.pesqnet.params.digest());
}

#[test]
fn accumulator_cases() {
    let g = vec![Tensor::from_elem(IxDyn(&[2, 3]), 1.5)];
    let neg = vec![Tensor::from_elem(IxDyn(&[2, 3]), -1.5)];
    let mut acc = GradAccumulator::new();
    assert!(acc.finalize().is_err());
    for _ in 0..3 {
        acc.add(&g);
    }
    assert_eq!(acc.finalize().unwrap(), g);
    let mut acc = GradAccumulator::new();
    acc.add(&g);
    acc.add(&neg);
    assert!(acc.finalize().unwrap()[0].iter().all(|v| *v == 0.0));
}

proptest! {
    #[test]
    fn accumulator_matches_arithmetic_mean(seed in 0u64..1000, count in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Vec<f64>> = (0..count).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut acc = GradAccumulator::new();
        for g in &grads {
            acc.add(&[Tensor::from_shape_vec(IxDyn(&[5]), g.clone()).unwrap()]);
        }
        let mean = acc.finalize().unwrap();
        for i in 0..5 {
            let expected = grads.iter().map(|g| g[i]).sum::<f64>() / count as f64;
            prop_assert!((mean[0][i] - expected).abs() <= 1e-12);
        }
    }
}
