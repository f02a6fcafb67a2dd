//! Instrumental metrics and the CSV files behind scatter plots and curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::fcrn::{spec_to_tensor, Fcrn, NormStats};
use crate::oracle::QualityOracle;
use crate::pesqnet::PesqNet;
use crate::synth::UtteranceRecord;
use crate::training::{amplitude, pesqnet_score, spectrum_to_waveform, Dataset, CurvePoint};

pub const SEG_FRAME: usize = 256;
pub const SEG_HOP: usize = 128;
pub const SEG_MIN_DB: f64 = -10.0;
pub const SEG_MAX_DB: f64 = 35.0;
/// Frames whose clean energy is below this are left out of the average.
pub const SEG_SILENCE: f64 = 1e-10;

fn check_len(a: &Waveform, b: &Waveform, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// Mean clamped frame SNR of `x` against `clean` over non-silent frames.
pub fn segmental_snr(clean: &Waveform, x: &Waveform) -> Result<f64> {
    check_len(clean, x, "segmental SNR")?;
    let n = clean.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + SEG_FRAME <= n {
        let s = &clean.samples[start..start + SEG_FRAME];
        let e: f64 = s.iter().map(|v| v * v).sum();
        if e >= SEG_SILENCE {
            let d: f64 = s
                .iter()
                .zip(&x.samples[start..start + SEG_FRAME])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let snr = if d == 0.0 { SEG_MAX_DB } else { 10.0 * (e / d).log10() };
            sum += snr.clamp(SEG_MIN_DB, SEG_MAX_DB);
            count += 1;
        }
        start += SEG_HOP;
    }
    if count == 0 {
        return Err(Error::Silent("clean reference has no active frame".into()));
    }
    Ok(sum / count as f64)
}

/// `SNRseg(enhanced) - SNRseg(noisy)`.
pub fn delta_snr_seg(clean: &Waveform, noisy: &Waveform, enhanced: &Waveform) -> Result<f64> {
    check_len(clean, enhanced, "delta SNRseg")?;
    Ok(segmental_snr(clean, enhanced)? - segmental_snr(clean, noisy)?)
}

/// Mean absolute difference of `(estimate, truth)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list".into()));
    }
    Ok(pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Pearson correlation of `(estimate, truth)` pairs.
pub fn lcc(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs 2 pairs, got {}", pairs.len())));
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::InvalidArgument("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    /// `noisy` or `enhanced`, suffixed with `/dry` or `/reverb`.
    pub condition: String,
    pub pesq_true: f64,
    pub pesq_hat: f64,
    /// Only for enhanced dry records.
    pub delta_snr_seg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub rows: usize,
    pub mae: Option<f64>,
    pub lcc: Option<f64>,
    pub mean_delta_snr_seg: Option<f64>,
    pub mean_pesq_true: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn filter(&self, prefix: &str) -> MetricReport {
        MetricReport {
            rows: self.rows.iter().filter(|r| r.condition.starts_with(prefix)).cloned().collect(),
        }
    }

    /// Aggregates recomputed from the rows; undefined quantities are `None`.
    pub fn aggregate(&self) -> Aggregate {
        let pairs: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.pesq_hat, r.pesq_true)).collect();
        let deltas: Vec<f64> = self.rows.iter().filter_map(|r| r.delta_snr_seg).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let truths: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Aggregate {
            rows: self.rows.len(),
            mae: mae(&pairs).ok(),
            lcc: lcc(&pairs).ok(),
            mean_delta_snr_seg: mean(&deltas),
            mean_pesq_true: mean(&truths),
        }
    }

    /// One `key=value` line per condition group.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or("na".to_string(), |x| format!("{x:.4}"));
        for cond in ["noisy", "enhanced", ""] {
            let a = self.filter(cond).aggregate();
            let name = if cond.is_empty() { "all" } else { cond };
            out.push_str(&format!(
                "{name}: rows={} mae={} lcc={} mean_pesq={} delta_snr_seg={}\n",
                a.rows,
                fmt(a.mae),
                fmt(a.lcc),
                fmt(a.mean_pesq_true),
                fmt(a.mean_delta_snr_seg)
            ));
        }
        out
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const SCATTER_HEADER: [&str; 5] = ["id", "condition", "pesq_true", "pesq_hat", "delta_snr_seg"];
pub const CURVES_HEADER: [&str; 4] = ["tau", "j_total", "mae", "mean_oracle_score"];

pub fn scatter_export(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), &SCATTER_HEADER, &report.rows)
}

pub fn scatter_import(path: impl AsRef<Path>) -> Result<MetricReport> {
    Ok(MetricReport {
        rows: read_rows(path.as_ref())?,
    })
}

pub fn curves_export(curves: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), &CURVES_HEADER, curves)
}

pub fn curves_import(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    read_rows(path.as_ref())
}

/// Scores noisy and enhanced versions of every record with the oracle and,
/// if given, the PESQNet.
pub fn evaluate(
    dns: &Fcrn,
    stats: &NormStats,
    records: &[UtteranceRecord],
    oracle: &dyn QualityOracle,
    pesqnet: Option<&PesqNet>,
    cfg: &StftConfig,
) -> Result<MetricReport> {
    let data = Dataset::prepare(records, stats, cfg)?;
    let mut rows = Vec::with_capacity(2 * records.len());
    for (r, u) in records.iter().zip(&data.items) {
        let est = crate::training::enhance_tensor(dns, u);
        let enhanced = spectrum_to_waveform(&est, cfg, r.mixture.len())?;
        let room = if r.is_reverberant() { "reverb" } else { "dry" };
        let hat = |amp: &crate::autograd::Tensor| pesqnet.map_or(f64::NAN, |n| pesqnet_score(n, amp));
        let noisy_amp = amplitude(&spec_to_tensor(&stft(&r.mixture, cfg)?));
        rows.push(MetricRow {
            id: r.id.clone(),
            condition: format!("noisy/{room}"),
            pesq_true: oracle.score(&r.mixture, &r.clean)?,
            pesq_hat: hat(&noisy_amp),
            delta_snr_seg: None,
        });
        rows.push(MetricRow {
            id: r.id.clone(),
            condition: format!("enhanced/{room}"),
            pesq_true: oracle.score(&enhanced, &r.clean)?,
            pesq_hat: hat(&amplitude(&est)),
            delta_snr_seg: if r.is_reverberant() {
                None
            } else {
                Some(delta_snr_seg(&r.clean, &r.mixture, &enhanced)?)
            },
        });
    }
    Ok(MetricReport { rows })
}
