use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::level::{active_level_dbov, mix_at_snr, normalize_level};
use super::rir::{reverberate, simulate_rir, RoomSpec, SPEED_OF_SOUND};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::{quantize_pcm16, read_wav, write_wav};

const PCM_MAX: f64 = 32767.0 / 32768.0;

/// One synthesized training example. `mixture == reverberated_clean + noise`
/// holds sample-exactly; `noise` is already scaled to `snr_db`.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub clean: Waveform,
    pub reverberated_clean: Waveform,
    pub noise: Waveform,
    pub mixture: Waveform,
    pub snr_db: f64,
    pub rir_id: Option<String>,
    pub level_dbov: f64,
}

impl UtteranceRecord {
    pub fn is_reverberant(&self) -> bool {
        self.rir_id.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub snr_range: (f64, f64),
    pub reverb_fraction: f64,
    pub level_dbov: f64,
    pub max_image_order: usize,
    pub max_rir_taps: Option<usize>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            snr_range: (0.0, 20.0),
            reverb_fraction: 0.0,
            level_dbov: -26.0,
            max_image_order: 6,
            max_rir_taps: Some(8000),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!("snr_range {lo}..{hi}")));
        }
        if !(0.0..=1.0).contains(&self.reverb_fraction) {
            return Err(Error::InvalidArgument(format!(
                "reverb_fraction {} outside [0, 1]",
                self.reverb_fraction
            )));
        }
        if !self.level_dbov.is_finite() || self.level_dbov >= 0.0 {
            return Err(Error::InvalidArgument(format!("level_dbov {}", self.level_dbov)));
        }
        Ok(())
    }
}

/// In-memory source material for one record, with optional per-record overrides.
#[derive(Debug, Clone)]
pub struct SourcePair {
    pub clean: Waveform,
    pub noise: Waveform,
    pub snr_db: Option<f64>,
    pub reverb: Option<bool>,
    pub rir_seed: Option<u64>,
}

impl SourcePair {
    pub fn new(clean: Waveform, noise: Waveform) -> Self {
        Self {
            clean,
            noise,
            snr_db: None,
            reverb: None,
            rir_seed: None,
        }
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Which records get reverberation: explicit flags win, and exactly
/// `round(fraction * m)` of the `m` unflagged records are drawn by seed.
fn reverb_plan(spec: &CorpusSpec, pairs: &[SourcePair]) -> Vec<bool> {
    let mut plan: Vec<bool> = pairs.iter().map(|p| p.reverb.unwrap_or(false)).collect();
    let mut free: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].reverb.is_none()).collect();
    let take = (spec.reverb_fraction * free.len() as f64).round() as usize;
    free.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    for &i in &free[..take] {
        plan[i] = true;
    }
    plan
}

/// Deterministic for a fixed seed; records are built in parallel from
/// per-record random streams, so thread count does not matter.
pub fn synthesize(spec: &CorpusSpec, pairs: &[SourcePair]) -> Result<Vec<UtteranceRecord>> {
    spec.validate()?;
    let plan = reverb_plan(spec, pairs);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| synthesize_one(spec, i, p, plan[i]))
        .collect()
}

fn synthesize_one(spec: &CorpusSpec, index: usize, p: &SourcePair, reverb: bool) -> Result<UtteranceRecord> {
    p.clean.check_pipeline_rate()?;
    p.noise.check_pipeline_rate()?;
    if p.clean.is_empty() || p.noise.is_empty() {
        return Err(Error::Empty(format!("source audio for record {index}")));
    }
    let mut rng = record_rng(spec.seed, index);
    let (lo, hi) = spec.snr_range;
    let drawn_snr = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let drawn_rir_seed: u64 = rng.random();
    let offset = rng.random_range(0..p.noise.len());
    let snr_db = p.snr_db.unwrap_or(drawn_snr);
    let rir_seed = p.rir_seed.unwrap_or(drawn_rir_seed);

    let n = p.clean.len();
    let clean = quantize_pcm16(&normalize_level(&p.clean, spec.level_dbov)?);
    let (reverberated, rir_id) = if reverb {
        let room = RoomSpec::sample(&mut ChaCha8Rng::seed_from_u64(rir_seed), spec.max_image_order);
        let mut h = simulate_rir(&room, SAMPLE_RATE, SPEED_OF_SOUND, spec.max_rir_taps)?;
        // Direct tap of 1 keeps the dry and wet components on the same level.
        let direct = h.samples.iter().copied().find(|&v| v != 0.0).unwrap_or(1.0);
        h = h.scaled(1.0 / direct);
        (
            quantize_pcm16(&reverberate(&clean, &h)?),
            Some(format!("rir-{rir_seed}")),
        )
    } else {
        (clean.clone(), None)
    };
    let segment = Waveform::new(
        (0..n)
            .map(|k| p.noise.samples[(offset + k) % p.noise.len()])
            .collect(),
    );
    let (mut mixture, mut noise) = mix_at_snr(&reverberated, &segment, snr_db)?;
    let (mut clean, mut reverberated) = (clean, reverberated);
    // Shared gain until every stored component fits the PCM range.
    loop {
        let peak = [&clean, &reverberated, &noise, &mixture]
            .iter()
            .map(|w| w.peak())
            .fold(0.0, f64::max);
        if peak <= PCM_MAX {
            break;
        }
        let g = 0.99 * PCM_MAX / peak;
        clean = quantize_pcm16(&clean.scaled(g));
        reverberated = if rir_id.is_some() {
            quantize_pcm16(&reverberated.scaled(g))
        } else {
            clean.clone()
        };
        noise = quantize_pcm16(&noise.scaled(g));
        mixture = Waveform::new(
            reverberated
                .samples
                .iter()
                .zip(&noise.samples)
                .map(|(s, d)| s + d)
                .collect(),
        );
    }
    Ok(UtteranceRecord {
        id: format!("utt{index:05}"),
        level_dbov: active_level_dbov(&clean)?,
        clean,
        reverberated_clean: reverberated,
        noise,
        mixture,
        snr_db,
        rir_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: Option<f64>,
    pub reverb: Option<bool>,
    pub rir_seed: Option<u64>,
}

/// Line-oriented corpus description.
///
/// ```text
/// # comment
/// seed 7
/// snr_range 0 20
/// reverb_fraction 0.5
/// level_dbov -26
/// max_image_order 6
/// clean/a.wav noise/n1.wav snr_db=5 reverb=1 rir_seed=42
/// clean/b.wav noise/n2.wav
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut spec = CorpusSpec::default();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::Manifest {
                line: lineno + 1,
                reason,
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let arity = |n: usize| {
                if toks.len() == n + 1 {
                    Ok(())
                } else {
                    Err(bad(format!("{} expects {n} value(s)", toks[0])))
                }
            };
            match toks[0] {
                "seed" => {
                    arity(1)?;
                    spec.seed = int(toks[1])?;
                }
                "snr_range" => {
                    arity(2)?;
                    spec.snr_range = (num(toks[1])?, num(toks[2])?);
                }
                "reverb_fraction" => {
                    arity(1)?;
                    spec.reverb_fraction = num(toks[1])?;
                }
                "level_dbov" => {
                    arity(1)?;
                    spec.level_dbov = num(toks[1])?;
                }
                "max_image_order" => {
                    arity(1)?;
                    spec.max_image_order = int(toks[1])? as usize;
                }
                "max_rir_taps" => {
                    arity(1)?;
                    let v = int(toks[1])? as usize;
                    spec.max_rir_taps = (v > 0).then_some(v);
                }
                _ => {
                    if toks.len() < 2 {
                        return Err(bad("record needs a clean and a noise path".into()));
                    }
                    let mut e = ManifestEntry {
                        clean: base_dir.join(toks[0]),
                        noise: base_dir.join(toks[1]),
                        snr_db: None,
                        reverb: None,
                        rir_seed: None,
                    };
                    for kv in &toks[2..] {
                        let (k, v) = kv
                            .split_once('=')
                            .ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
                        match k {
                            "snr_db" => e.snr_db = Some(num(v)?),
                            "reverb" => {
                                e.reverb = Some(match v {
                                    "1" | "true" | "yes" => true,
                                    "0" | "false" | "no" => false,
                                    _ => return Err(bad(format!("reverb={v}"))),
                                })
                            }
                            "rir_seed" => e.rir_seed = Some(int(v)?),
                            _ => return Err(bad(format!("unknown key {k:?}"))),
                        }
                    }
                    entries.push(e);
                }
            }
        }
        spec.validate()?;
        Ok(Self { spec, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Reads every referenced file and synthesizes the corpus. All missing
/// paths are reported together before any audio is read.
pub fn build_corpus(manifest: &Manifest) -> Result<Vec<UtteranceRecord>> {
    let mut seen = std::collections::HashSet::new();
    let missing: Vec<PathBuf> = manifest
        .entries
        .iter()
        .flat_map(|e| [&e.clean, &e.noise])
        .filter(|p| !p.is_file() && seen.insert(*p))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let pairs = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(SourcePair {
                clean: read_wav(&e.clean)?,
                noise: read_wav(&e.noise)?,
                snr_db: e.snr_db,
                reverb: e.reverb,
                rir_seed: e.rir_seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    synthesize(&manifest.spec, &pairs)
}

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: String,
    clean: String,
    reverberated_clean: String,
    noise: String,
    mixture: String,
    snr_db: f64,
    rir_id: String,
    level_dbov: f64,
}

/// Writes four WAVs per record plus `index.csv`.
pub fn write_corpus(records: &[UtteranceRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = csv::Writer::from_path(dir.join(INDEX_FILE))?;
    for r in records {
        let names = ["clean", "reverb", "noise", "mix"].map(|s| format!("{}_{s}.wav", r.id));
        for (name, w) in names
            .iter()
            .zip([&r.clean, &r.reverberated_clean, &r.noise, &r.mixture])
        {
            write_wav(dir.join(name), w)?;
        }
        let [clean, reverberated_clean, noise, mixture] = names;
        index.serialize(IndexRow {
            id: r.id.clone(),
            clean,
            reverberated_clean,
            noise,
            mixture,
            snr_db: r.snr_db,
            rir_id: r.rir_id.clone().unwrap_or_default(),
            level_dbov: r.level_dbov,
        })?;
    }
    index.flush()?;
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let dir = dir.as_ref();
    let index = dir.join(INDEX_FILE);
    if !index.is_file() {
        return Err(Error::MissingFiles(vec![index]));
    }
    let mut reader = csv::Reader::from_path(&index)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: IndexRow = row?;
        out.push(UtteranceRecord {
            clean: read_wav(dir.join(&row.clean))?,
            reverberated_clean: read_wav(dir.join(&row.reverberated_clean))?,
            noise: read_wav(dir.join(&row.noise))?,
            mixture: read_wav(dir.join(&row.mixture))?,
            id: row.id,
            snr_db: row.snr_db,
            rir_id: (!row.rir_id.is_empty()).then_some(row.rir_id),
            level_dbov: row.level_dbov,
        });
    }
    Ok(out)
}

/// SHA-256 over ids, metadata and every sample of every record.
pub fn corpus_digest(records: &[UtteranceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update(r.snr_db.to_bits().to_le_bytes());
        h.update(r.rir_id.as_deref().unwrap_or("").as_bytes());
        for w in [&r.clean, &r.reverberated_clean, &r.noise, &r.mixture] {
            h.update((w.len() as u64).to_le_bytes());
            for x in &w.samples {
                h.update(x.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}
