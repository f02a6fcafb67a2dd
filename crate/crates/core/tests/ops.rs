use std::path::Path;
use std::process::{Command, Output};

use dns_pesqnet::autograd::Tensor;
use dns_pesqnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use dns_pesqnet::desk::{tiny_fcrn, tiny_pesqnet};
use dns_pesqnet::dsp::Waveform;
use dns_pesqnet::error::Error;
use dns_pesqnet::fcrn::{Fcrn, NormStats};
use dns_pesqnet::pesqnet::PesqNet;
use dns_pesqnet::wav::{read_wav, write_wav};
use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn checkpoints_round_trip_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let dns = Fcrn::new(tiny_fcrn(), 3).unwrap();
    let stats = NormStats::identity(dns.cfg.n_bins);
    save_checkpoint(dir.path().join("dns.ckpt"), &Checkpoint::from_fcrn(&dns, &stats).unwrap()).unwrap();
    let (back, back_stats) = load_checkpoint(dir.path().join("dns.ckpt")).unwrap().to_fcrn().unwrap();
    assert_eq!(back_stats, stats);
    let x = random(&[1, 2, dns.cfg.n_bins, 7], 1);
    assert_eq!(dns.mask_tensor(&x).unwrap(), back.mask_tensor(&x).unwrap());

    let net = PesqNet::new(tiny_pesqnet(), 4).unwrap();
    save_checkpoint(dir.path().join("net.ckpt"), &Checkpoint::from_pesqnet(&net).unwrap()).unwrap();
    let back = load_checkpoint(dir.path().join("net.ckpt")).unwrap().to_pesqnet().unwrap();
    let amp: Array2<f64> = random(&[9, net.cfg.n_bins], 2).mapv(f64::abs).into_dimensionality().unwrap();
    assert_eq!(net.estimate_pesq(&amp).unwrap().to_bits(), back.estimate_pesq(&amp).unwrap().to_bits());
    assert!(load_checkpoint(dir.path().join("net.ckpt")).unwrap().to_fcrn().is_err());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let net = PesqNet::new(tiny_pesqnet(), 4).unwrap();
    save_checkpoint(&path, &Checkpoint::from_pesqnet(&net).unwrap()).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] = if bytes[n - 20] == b'1' { b'2' } else { b'1' };
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, &bytes[..n / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    std::fs::write(&path, "not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    assert!(matches!(
        load_checkpoint(dir.path().join("absent.ckpt")),
        Err(Error::MissingPrerequisite(_))
    ));
}

const FAST: [&str; 10] = [
    "pretrain_dns.max_epochs=1",
    "pretrain_pesqnet.max_epochs=1",
    "finetune1.dns.max_epochs=1",
    "finetune1.pesqnet.max_epochs=1",
    "finetune2.epochs=2",
    "val_fraction=0.25",
    "pretrain_dns.lr=0.001",
    "pretrain_pesqnet.lr=0.001",
    "finetune1.dns.lr=0.001",
    "finetune1.pesqnet.lr=0.001",
];

fn cli(ws: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dns-pesqnet"));
    cmd.arg("--workspace").arg(ws).args(["--preset", "desk"]);
    for s in FAST {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().unwrap()
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = cli(ws, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn digest_of(stdout: &str) -> String {
    stdout.split_whitespace().find_map(|w| w.strip_prefix("digest=")).unwrap().to_string()
}

#[test]
fn cli_end_to_end() {
    let ws = tempfile::tempdir().unwrap();
    let ws = ws.path();
    let synth = ok(ws, &["synth", "--desk", "--utterances", "8", "--out", "corpus/pretrain"]);
    ok(ws, &["--seed", "9", "synth", "--desk", "--utterances", "8", "--reverb-fraction", "0.5", "--out", "corpus/finetune"]);
    ok(ws, &["pretrain-dns"]);
    ok(ws, &["pretrain-pesqnet"]);
    ok(ws, &["finetune1"]);
    ok(ws, &["finetune2", "--alpha", "0"]);
    ok(ws, &["evaluate", "--out", "eval/scatter.csv"]);

    for f in [
        "runs/pretrain-dns/dns_history.csv",
        "runs/pretrain-pesqnet/pesqnet_history.csv",
        "runs/finetune1/dns_history.csv",
        "runs/finetune1/pesqnet_history.csv",
        "runs/finetune2-alpha0/curves.csv",
        "eval/scatter.csv",
    ] {
        let text = std::fs::read_to_string(ws.join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert!(text.lines().count() >= 2, "{f} has no rows");
    }
    let curves = std::fs::read_to_string(ws.join("runs/finetune2-alpha0/curves.csv")).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "tau,j_total,mae,mean_oracle_score");
    assert_eq!(curves.lines().count(), 4);
    for dir in ["runs/pretrain-dns", "runs/finetune2-alpha0", "corpus/pretrain", "eval"] {
        assert!(ws.join(dir).join("config.toml").is_file(), "{dir}");
        assert!(ws.join(dir).join("VERSION").is_file(), "{dir}");
    }

    // Identity enhancement reproduces the input up to PCM quantization.
    let input: Waveform = {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Waveform::new((0..8000).map(|i| 0.3 * (i as f64 * 0.01).sin() + 0.01 * rng.random_range(-1.0..1.0)).collect())
    };
    write_wav(ws.join("in.wav"), &input).unwrap();
    ok(ws, &["enhance", "--input", "in.wav", "--output", "same.wav", "--identity-mask"]);
    let same = read_wav(ws.join("same.wav")).unwrap();
    let original = read_wav(ws.join("in.wav")).unwrap();
    assert_eq!(same.len(), original.len());
    let err = same.samples.iter().zip(&original.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 2.0 / 32768.0, "max deviation {err}");
    ok(ws, &["enhance", "--input", "in.wav", "--output", "enhanced.wav"]);
    assert_eq!(read_wav(ws.join("enhanced.wav")).unwrap().len(), original.len());

    // Idempotent reruns; a second synthesis with the same seed has the same digest.
    assert!(ok(ws, &["pretrain-dns"]).contains("up to date"));
    let again = ok(ws, &["synth", "--desk", "--utterances", "8", "--out", "corpus/again"]);
    assert_eq!(digest_of(&synth), digest_of(&again));

    // A differing config in an existing directory is refused with one machine-parsable line.
    let out = cli(ws, &["--set", "pretrain_dns.seed=4", "pretrain-dns"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: kind=config_conflict"), "{stderr}");
}

#[test]
fn cli_reports_problems_on_one_line() {
    let ws = tempfile::tempdir().unwrap();
    let out = cli(ws.path(), &["pretrain-pesqnet"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: kind=missing_prerequisite"), "{stderr}");

    let out = cli(ws.path(), &["--set", "finetune2.alpha=2", "--set", "stft.frame_len=0", "show-config"]);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.contains("alpha") && stderr.contains("frame"), "{stderr}");

    let out = cli(ws.path(), &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}
