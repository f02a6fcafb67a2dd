//! Intrusive quality scoring used as ground truth for PESQNet.
//!
//! [`SurrogateOracle`] is a closed-form log-spectral-distance score that keeps
//! everything self-contained. [`ExternalPesq`] shells out to a PESQ tool.

use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::pesqnet::{PESQ_MAX, PESQ_MIN};
use crate::wav::write_wav;

/// Overrides the external oracle command template.
pub const ORACLE_CMD_ENV: &str = "DNS_PESQNET_ORACLE_CMD";

pub trait QualityOracle: Send + Sync {
    /// Score of `enhanced` against `reference`, within `[1.04, 4.64]`.
    fn score(&self, enhanced: &Waveform, reference: &Waveform) -> Result<f64>;

    /// Scores in input order.
    fn score_many(&self, pairs: &[(&Waveform, &Waveform)]) -> Result<Vec<f64>> {
        pairs.iter().map(|(e, r)| self.score(e, r)).collect()
    }
}

fn check_pair(enhanced: &Waveform, reference: &Waveform) -> Result<()> {
    if enhanced.sample_rate != reference.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            enhanced.sample_rate, reference.sample_rate
        )));
    }
    if enhanced.len() != reference.len() {
        return Err(Error::Shape(format!(
            "enhanced has {} samples, reference {}",
            enhanced.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub const SURROGATE_GAMMA: f64 = 1.0;
pub const SURROGATE_EPS: f64 = 1e-6;

/// `1.04 + 3.6 * exp(-lsd / gamma)`.
pub fn surrogate_from_lsd(lsd: f64) -> f64 {
    PESQ_MIN + (PESQ_MAX - PESQ_MIN) * (-lsd / SURROGATE_GAMMA).exp()
}

/// Mean over frames and physical bins of `|ln(|E| + eps) - ln(|S| + eps)|`.
pub fn log_spectral_distance(enhanced: &Waveform, reference: &Waveform, cfg: &StftConfig) -> Result<f64> {
    check_pair(enhanced, reference)?;
    let e = stft(enhanced, cfg)?;
    let s = stft(reference, cfg)?;
    let k = cfg.physical_bins();
    let mut acc = 0.0;
    for (re, rs) in e.data.rows().into_iter().zip(s.data.rows()) {
        for (a, b) in re.iter().zip(rs.iter()).take(k) {
            acc += ((a.norm() + SURROGATE_EPS).ln() - (b.norm() + SURROGATE_EPS).ln()).abs();
        }
    }
    Ok(acc / (e.frames() * k) as f64)
}

#[derive(Debug, Clone, Default)]
pub struct SurrogateOracle {
    pub stft: StftConfig,
}

impl QualityOracle for SurrogateOracle {
    fn score(&self, enhanced: &Waveform, reference: &Waveform) -> Result<f64> {
        Ok(surrogate_from_lsd(log_spectral_distance(enhanced, reference, &self.stft)?))
    }
}

/// Runs an external command per call. The template's `{ref}` and `{deg}`
/// tokens are replaced with WAV paths; the score is taken from the last
/// output line that matches `pattern` (first capture group, or whole match).
#[derive(Debug)]
pub struct ExternalPesq {
    pub command: Vec<String>,
    pub pattern: Regex,
    pub timeout: Duration,
    pub max_concurrent: usize,
}

pub const DEFAULT_SCORE_PATTERN: &str = r"([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*$";

impl ExternalPesq {
    pub fn new(template: &str, pattern: Option<&str>, timeout: Duration, max_concurrent: usize) -> Result<Self> {
        let command: Vec<String> = template.split_whitespace().map(str::to_string).collect();
        if command.is_empty() {
            return Err(Error::InvalidArgument("empty oracle command".into()));
        }
        let pattern = Regex::new(pattern.unwrap_or(DEFAULT_SCORE_PATTERN))
            .map_err(|e| Error::InvalidArgument(format!("oracle pattern: {e}")))?;
        Ok(Self {
            command,
            pattern,
            timeout,
            max_concurrent: max_concurrent.max(1),
        })
    }

    fn run(&self, ref_path: &Path, deg_path: &Path) -> Result<f64> {
        let fill = |s: &String| {
            s.replace("{ref}", &ref_path.to_string_lossy())
                .replace("{deg}", &deg_path.to_string_lossy())
        };
        let mut child = Command::new(fill(&self.command[0]))
            .args(self.command[1..].iter().map(fill))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Oracle {
                message: format!("cannot start {:?}: {e}", self.command[0]),
                output: String::new(),
            })?;
        let mut out_pipe = child.stdout.take().unwrap();
        let mut err_pipe = child.stderr.take().unwrap();
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = out_pipe.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });
        let status = match child.wait_timeout(self.timeout)? {
            Some(st) => st,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Oracle {
                    message: format!("timed out after {:?}", self.timeout),
                    output: String::new(),
                });
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        let output = format!("{stdout}{stderr}");
        if !status.success() {
            return Err(Error::Oracle {
                message: format!("exited with {status}"),
                output,
            });
        }
        let value = stdout
            .lines()
            .rev()
            .find_map(|line| {
                self.pattern
                    .captures(line)
                    .map(|c| c.get(1).unwrap_or_else(|| c.get(0).unwrap()).as_str().to_string())
            })
            .ok_or_else(|| Error::Oracle {
                message: "no output line matches the score pattern".into(),
                output: output.clone(),
            })?;
        let score: f64 = value.trim().parse().map_err(|_| Error::Oracle {
            message: format!("cannot parse score {value:?}"),
            output: output.clone(),
        })?;
        if !score.is_finite() {
            return Err(Error::Oracle {
                message: format!("non-finite score {score}"),
                output,
            });
        }
        Ok(score.clamp(PESQ_MIN, PESQ_MAX))
    }
}

impl QualityOracle for ExternalPesq {
    fn score(&self, enhanced: &Waveform, reference: &Waveform) -> Result<f64> {
        check_pair(enhanced, reference)?;
        let dir = tempfile::tempdir()?;
        let ref_path = dir.path().join("reference.wav");
        let deg_path = dir.path().join("degraded.wav");
        write_wav(&ref_path, reference)?;
        write_wav(&deg_path, enhanced)?;
        self.run(&ref_path, &deg_path)
    }

    /// At most `max_concurrent` subprocesses at a time.
    fn score_many(&self, pairs: &[(&Waveform, &Waveform)]) -> Result<Vec<f64>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<f64>>>> = Mutex::new((0..pairs.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.max_concurrent.min(pairs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= pairs.len() {
                        break;
                    }
                    let r = self.score(pairs[i].0, pairs[i].1);
                    results.lock().unwrap()[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every index scored"))
            .collect()
    }
}

/// Serializable oracle choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    Surrogate,
    ExternalPesq {
        command: String,
        #[serde(default)]
        pattern: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
        #[serde(default = "default_concurrency")]
        max_concurrent: usize,
    },
}

fn default_timeout() -> f64 {
    30.0
}

fn default_concurrency() -> usize {
    1
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Surrogate
    }
}

impl OracleSpec {
    /// Builds the oracle; a set [`ORACLE_CMD_ENV`] replaces the external command.
    pub fn build(&self) -> Result<Box<dyn QualityOracle>> {
        match self {
            OracleSpec::Surrogate => Ok(Box::new(SurrogateOracle::default())),
            OracleSpec::ExternalPesq {
                command,
                pattern,
                timeout_s,
                max_concurrent,
            } => {
                let command = std::env::var(ORACLE_CMD_ENV).unwrap_or_else(|_| command.clone());
                if !(*timeout_s > 0.0) {
                    return Err(Error::InvalidArgument(format!("oracle timeout {timeout_s}")));
                }
                Ok(Box::new(ExternalPesq::new(
                    &command,
                    pattern.as_deref(),
                    Duration::from_secs_f64(*timeout_s),
                    *max_concurrent,
                )?))
            }
        }
    }
}
