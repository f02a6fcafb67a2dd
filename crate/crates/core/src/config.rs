//! Run configuration: one TOML document covering every phase. Files and
//! `--set` overrides are merged key by key over the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::desk::{tiny_fcrn, tiny_pesqnet};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::fcrn::FcrnConfig;
use crate::oracle::OracleSpec;
use crate::pesqnet::PesqNetConfig;
use crate::training::{PhaseConfig, Stage2Config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Reverberation-free corpus for both pre-training phases.
    pub pretrain_corpus: PathBuf,
    /// Corpus for both fine-tuning stages and evaluation.
    pub finetune_corpus: PathBuf,
    /// Root of all phase output directories.
    pub runs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finetune1Config {
    pub beta: f64,
    pub dns: PhaseConfig,
    pub pesqnet: PhaseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against this directory.
    pub workspace: PathBuf,
    pub seed: u64,
    pub val_fraction: f64,
    pub paths: Paths,
    pub stft: StftConfig,
    pub fcrn: FcrnConfig,
    pub pesqnet: PesqNetConfig,
    pub oracle: OracleSpec,
    pub pretrain_dns: PhaseConfig,
    pub pretrain_pesqnet: PhaseConfig,
    pub finetune1: Finetune1Config,
    pub finetune2: Stage2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("."),
            seed: 0,
            val_fraction: 0.2,
            paths: Paths {
                pretrain_corpus: PathBuf::from("corpus/pretrain"),
                finetune_corpus: PathBuf::from("corpus/finetune"),
                runs: PathBuf::from("runs"),
            },
            stft: StftConfig::default(),
            fcrn: FcrnConfig::default(),
            pesqnet: PesqNetConfig::default(),
            oracle: OracleSpec::default(),
            pretrain_dns: PhaseConfig::pretrain_dns(),
            pretrain_pesqnet: PhaseConfig::pretrain_pesqnet(),
            finetune1: Finetune1Config {
                beta: 0.9,
                dns: PhaseConfig::stage1_dns(),
                pesqnet: PhaseConfig::stage1_pesqnet(),
            },
            finetune2: Stage2Config::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-size models and full-scale learning rates.
    Full,
    /// Tiny models, raised learning rates and epoch caps for one CPU core.
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?} (full, desk)"))),
        }
    }
}

fn capped(mut p: PhaseConfig, lr: f64, epochs: usize) -> PhaseConfig {
    p.lr = lr;
    p.stop_lr = lr / 20.0;
    p.max_epochs = Some(epochs);
    p
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            fcrn: tiny_fcrn(),
            pesqnet: tiny_pesqnet(),
            pretrain_dns: capped(base.pretrain_dns, 1e-3, 10),
            pretrain_pesqnet: capped(base.pretrain_pesqnet, 2e-3, 20),
            finetune1: Finetune1Config {
                beta: 0.9,
                dns: capped(base.finetune1.dns, 2e-4, 4),
                pesqnet: capped(base.finetune1.pesqnet, 5e-4, 6),
            },
            finetune2: Stage2Config {
                dns_lr: 1e-3,
                pesqnet_lr: 2e-3,
                ..Stage2Config::default()
            },
            ..base
        }
    }

    /// Merges `overlay` onto this config key by key.
    pub fn merged(&self, overlay: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Config(vec![e.to_string()]))?;
        merge(&mut base, overlay);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))
    }

    pub fn merged_file(&self, path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPrerequisite(format!("config file {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
        self.merged(table)
    }

    /// Applies `dotted.key=value` overrides; values are TOML literals, and
    /// anything that does not parse as one is taken as a string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut overlay = toml::Table::new();
        let mut errs = Vec::new();
        for s in sets {
            let Some((key, raw)) = s.split_once('=') else {
                errs.push(format!("override {s:?} is not key=value"));
                continue;
            };
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            insert_path(&mut overlay, &parts, value);
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        self.merged(overlay)
    }

    /// Every problem in the config, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut push = |r: Result<()>| {
            match r {
                Ok(()) => {}
                Err(Error::Config(list)) => errs.extend(list),
                Err(e) => errs.push(e.to_string()),
            }
        };
        push(self.stft.validate());
        push(self.fcrn.validate());
        push(self.pesqnet.validate());
        let mut errs2 = Vec::new();
        if self.fcrn.n_bins != self.stft.n_bins {
            errs2.push(format!("fcrn.n_bins = {} differs from stft.n_bins = {}", self.fcrn.n_bins, self.stft.n_bins));
        }
        if self.pesqnet.n_bins != self.stft.n_bins {
            errs2.push(format!(
                "pesqnet.n_bins = {} differs from stft.n_bins = {}",
                self.pesqnet.n_bins, self.stft.n_bins
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            errs2.push(format!("val_fraction = {} outside (0, 1)", self.val_fraction));
        }
        if !(0.0..=1.0).contains(&self.finetune1.beta) {
            errs2.push(format!("finetune1.beta = {} outside [0, 1]", self.finetune1.beta));
        }
        errs2.extend(self.pretrain_dns.validate("pretrain_dns"));
        errs2.extend(self.pretrain_pesqnet.validate("pretrain_pesqnet"));
        errs2.extend(self.finetune1.dns.validate("finetune1.dns"));
        errs2.extend(self.finetune1.pesqnet.validate("finetune1.pesqnet"));
        errs2.extend(self.finetune2.validate());
        if let OracleSpec::ExternalPesq { command, timeout_s, max_concurrent, .. } = &self.oracle {
            if command.trim().is_empty() {
                errs2.push("oracle.command is empty".into());
            }
            if !(*timeout_s > 0.0) {
                errs2.push(format!("oracle.timeout_s = {timeout_s} must be positive"));
            }
            if *max_concurrent == 0 {
                errs2.push("oracle.max_concurrent must be positive".into());
            }
        }
        errs.extend(errs2);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workspace.join(p)
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn insert_path(t: &mut toml::Table, parts: &[&str], value: toml::Value) {
    match parts {
        [] => {}
        [last] => {
            t.insert(last.to_string(), value);
        }
        [head, rest @ ..] => {
            let child = t
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if !child.is_table() {
                *child = toml::Value::Table(toml::Table::new());
            }
            insert_path(child.as_table_mut().unwrap(), rest, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            c.validate().unwrap();
            let text = c.to_toml().unwrap();
            let back = RunConfig::default().merged(text.parse().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_sections_and_overrides() {
        let c = RunConfig::default()
            .merged("[finetune2]\nalpha = 0.5\n".parse().unwrap())
            .unwrap()
            .with_overrides(&["finetune2.dns_lr=3e-3".into(), "paths.runs=out".into()])
            .unwrap();
        assert_eq!(c.finetune2.alpha, 0.5);
        assert_eq!(c.finetune2.dns_lr, 3e-3);
        assert_eq!(c.finetune2.epochs, 25);
        assert_eq!(c.paths.runs, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::default().merged("[fcrn]\nfilterz = 3\n".parse().unwrap()).unwrap_err();
        assert!(e.to_string().contains("filterz"), "{e}");
    }

    #[test]
    fn validation_lists_every_error() {
        let c = RunConfig::default()
            .with_overrides(&[
                "fcrn.filters=0".into(),
                "finetune2.alpha=1.5".into(),
                "pretrain_dns.batch_size=0".into(),
                "val_fraction=0".into(),
            ])
            .unwrap();
        match c.validate() {
            Err(Error::Config(list)) => assert!(list.len() >= 4, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }
}
