use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dns_pesqnet::dsp::Waveform;
use dns_pesqnet::error::Error;
use dns_pesqnet::oracle::{ExternalPesq, OracleSpec, QualityOracle, ORACLE_CMD_ENV};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

fn pair(n: usize) -> (Waveform, Waveform) {
    let clean: Vec<f64> = (0..n).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    let enh: Vec<f64> = clean.iter().map(|v| v * 0.9).collect();
    (Waveform::new(enh), Waveform::new(clean))
}

fn oracle(cmd: String, pattern: Option<&str>, timeout: f64, limit: usize) -> ExternalPesq {
    ExternalPesq::new(&cmd, pattern, Duration::from_secs_f64(timeout), limit).unwrap()
}

#[test]
fn parses_the_last_matching_line() {
    let dir = tempfile::tempdir().unwrap();
    let tool = script(
        dir.path(),
        "pesq.sh",
        r#"test -f "$1" && test -f "$2" || exit 3
echo "Reading $1"
echo "P.862 Prediction (Raw MOS, MOS-LQO):  = 2.100   2.875""#,
    );
    let (e, r) = pair(800);
    let o = oracle(format!("{} {{ref}} {{deg}}", tool.display()), None, 5.0, 1);
    assert_eq!(o.score(&e, &r).unwrap(), 2.875);
    let raw = oracle(format!("{} {{ref}} {{deg}}", tool.display()), Some(r"=\s*([0-9.]+)"), 5.0, 1);
    assert_eq!(raw.score(&e, &r).unwrap(), 2.1);
}

#[test]
fn out_of_range_scores_are_clamped() {
    let dir = tempfile::tempdir().unwrap();
    let hi = script(dir.path(), "hi.sh", "echo 4.9");
    let lo = script(dir.path(), "lo.sh", "echo 0.5");
    let (e, r) = pair(500);
    assert_eq!(oracle(hi.display().to_string(), None, 5.0, 1).score(&e, &r).unwrap(), 4.64);
    assert_eq!(oracle(lo.display().to_string(), None, 5.0, 1).score(&e, &r).unwrap(), 1.04);
}

#[test]
fn failures_carry_the_tool_output() {
    let dir = tempfile::tempdir().unwrap();
    let (e, r) = pair(500);
    let failing = script(dir.path(), "fail.sh", "echo 'license check failed' >&2\nexit 2");
    match oracle(failing.display().to_string(), None, 5.0, 1).score(&e, &r) {
        Err(Error::Oracle { output, .. }) => assert!(output.contains("license check failed")),
        other => panic!("{other:?}"),
    }
    let silent = script(dir.path(), "silent.sh", "echo 'no score here'");
    match oracle(silent.display().to_string(), None, 5.0, 1).score(&e, &r) {
        Err(Error::Oracle { output, .. }) => assert!(output.contains("no score here")),
        other => panic!("{other:?}"),
    }
    let missing = dir.path().join("absent-tool");
    assert!(matches!(
        oracle(missing.display().to_string(), None, 5.0, 1).score(&e, &r),
        Err(Error::Oracle { .. })
    ));
    let ok = script(dir.path(), "ok.sh", "echo 3.0");
    assert!(oracle(ok.display().to_string(), None, 5.0, 1).score(&e, &Waveform::new(vec![0.1; 10])).is_err());
}

#[test]
fn slow_tools_time_out() {
    let dir = tempfile::tempdir().unwrap();
    let slow = script(dir.path(), "slow.sh", "sleep 10\necho 3.0");
    let (e, r) = pair(500);
    let t0 = Instant::now();
    let res = oracle(slow.display().to_string(), None, 0.3, 1).score(&e, &r);
    assert!(matches!(res, Err(Error::Oracle { .. })), "{res:?}");
    assert!(t0.elapsed() < Duration::from_secs(5));
}

#[test]
fn environment_overrides_the_configured_command() {
    let dir = tempfile::tempdir().unwrap();
    let tool = script(dir.path(), "env.sh", "echo 3.25");
    let spec = OracleSpec::ExternalPesq {
        command: "/nonexistent/pesq {ref} {deg}".into(),
        pattern: None,
        timeout_s: 5.0,
        max_concurrent: 1,
    };
    std::env::set_var(ORACLE_CMD_ENV, format!("{} {{ref}} {{deg}}", tool.display()));
    let built = spec.build();
    std::env::remove_var(ORACLE_CMD_ENV);
    let (e, r) = pair(500);
    assert_eq!(built.unwrap().score(&e, &r).unwrap(), 3.25);
}

#[test]
fn concurrent_calls_respect_the_limit_and_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let slots = dir.path().join("slots");
    std::fs::create_dir(&slots).unwrap();
    let log = dir.path().join("log");
    // Score encodes the degraded file size; the log records concurrency and paths.
    let tool = script(
        dir.path(),
        "conc.sh",
        &format!(
            r#"mkdir {slots}/$$
echo "$(ls {slots} | wc -l) $1" >> {log}
sleep 0.3
rmdir {slots}/$$
echo "2.$(wc -c < "$2" | tr -d ' ')""#,
            slots = slots.display(),
            log = log.display()
        ),
    );
    let waves: Vec<(Waveform, Waveform)> = (0..6).map(|i| pair(100 + i)).collect();
    let pairs: Vec<(&Waveform, &Waveform)> = waves.iter().map(|(e, r)| (e, r)).collect();
    let o = oracle(format!("{} {{ref}} {{deg}}", tool.display()), None, 10.0, 2);
    let scores = o.score_many(&pairs).unwrap();
    let expected: Vec<f64> = (0..6).map(|i| format!("2.{}", 44 + 2 * (100 + i)).parse().unwrap()).collect();
    assert_eq!(scores, expected);

    let lines = std::fs::read_to_string(&log).unwrap();
    let peak = lines.lines().map(|l| l.split(' ').next().unwrap().parse::<usize>().unwrap()).max().unwrap();
    assert!(peak <= 2, "peak concurrency {peak}");
    let mut refs: Vec<&str> = lines.lines().map(|l| l.split(' ').nth(1).unwrap()).collect();
    refs.sort();
    refs.dedup();
    assert_eq!(refs.len(), 6, "temp files must be unique per call");
}
