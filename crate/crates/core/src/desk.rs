//! Small synthetic setups that run end to end on one CPU core.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::fcrn::{Fcrn, FcrnConfig, NormStats};
use crate::oracle::QualityOracle;
use crate::pesqnet::{PesqNet, PesqNetConfig};
use crate::training::{
    finetune_stage1, norm_stats_for, pretrain_dns, pretrain_pesqnet, split_train_val, Dataset, EpochRecord,
    Stage1Outcome,
};
use crate::synth::signals::{noise, speech_like, NoiseKind};
use crate::synth::{synthesize, CorpusSpec, SourcePair, UtteranceRecord};
use crate::dsp::SAMPLE_RATE;

/// Synthetic corpus shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskCorpus {
    pub utterances: usize,
    pub seconds: f64,
    pub seed: u64,
    pub snr_range: (f64, f64),
    pub reverb_fraction: f64,
}

impl Default for DeskCorpus {
    fn default() -> Self {
        Self {
            utterances: 48,
            seconds: 1.0,
            seed: 7,
            snr_range: (0.0, 10.0),
            reverb_fraction: 0.0,
        }
    }
}

impl DeskCorpus {
    /// Reverberation-free corpus for the pre-training phases.
    pub fn pretraining() -> Self {
        Self {
            utterances: 40,
            seed: 1,
            ..Self::default()
        }
    }

    /// Corpus for fine-tuning; a quarter of the records are reverberant.
    pub fn finetuning() -> Self {
        Self {
            utterances: 40,
            seed: 2,
            reverb_fraction: 0.25,
            ..Self::default()
        }
    }

    /// Speech-like and noise signals paired round-robin over every noise kind.
    pub fn pairs(&self) -> Vec<SourcePair> {
        let len = (self.seconds * SAMPLE_RATE as f64).round() as usize;
        (0..self.utterances)
            .map(|i| {
                let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let kind = NoiseKind::ALL[i % NoiseKind::ALL.len()];
                SourcePair::new(speech_like(len, seed), noise(kind, len * 2, seed ^ 0x5eed))
            })
            .collect()
    }

    pub fn spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            snr_range: self.snr_range,
            reverb_fraction: self.reverb_fraction,
            ..CorpusSpec::default()
        }
    }

    pub fn synthesize(&self) -> Result<Vec<UtteranceRecord>> {
        synthesize(&self.spec(), &self.pairs())
    }
}

pub fn tiny_fcrn() -> FcrnConfig {
    FcrnConfig {
        filters: 8,
        kernel_height: 5,
        ..FcrnConfig::default()
    }
}

pub fn tiny_pesqnet() -> PesqNetConfig {
    PesqNetConfig {
        encoder_channels: [4, 8],
        width_filters: 8,
        blstm_hidden: 8,
        fc: vec![16, 8, 1],
        log_compress: true,
        ..PesqNetConfig::default()
    }
}

/// Both corpora split by `cfg.val_fraction` and prepared with the
/// statistics of the pre-training split.
#[derive(Debug, Clone)]
pub struct DeskData {
    pub stats: NormStats,
    pub pretrain: (Dataset, Dataset),
    pub finetune: (Dataset, Dataset),
}

impl DeskData {
    pub fn new(cfg: &RunConfig, pretrain: &DeskCorpus, finetune: &DeskCorpus) -> Result<Self> {
        let (ptr, pva) = split_train_val(pretrain.synthesize()?, cfg.val_fraction)?;
        let (ftr, fva) = split_train_val(finetune.synthesize()?, cfg.val_fraction)?;
        let stats = norm_stats_for(&ptr, &cfg.stft)?;
        let prep = |r: &[UtteranceRecord]| Dataset::prepare(r, &stats, &cfg.stft);
        Ok(Self {
            pretrain: (prep(&ptr)?, prep(&pva)?),
            finetune: (prep(&ftr)?, prep(&fva)?),
            stats,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DeskModels {
    pub pretrained_dns: Fcrn,
    pub pretrained_pesqnet: PesqNet,
    pub pretrain_dns_history: Vec<EpochRecord>,
    pub pretrain_pesqnet_history: Vec<EpochRecord>,
    pub stage1: Stage1Outcome,
}

/// Both pre-training phases and stage 1, initialized from `cfg.seed` like the CLI.
pub fn train_to_stage1(cfg: &RunConfig, data: &DeskData, oracle: &dyn QualityOracle) -> Result<DeskModels> {
    let (p, f) = (&data.pretrain, &data.finetune);
    let dns0 = Fcrn::new(cfg.fcrn.clone(), cfg.seed)?;
    let (dns, dns_hist) = pretrain_dns(dns0, &p.0, &p.1, cfg.pretrain_dns.clone())?;
    let net0 = PesqNet::new(cfg.pesqnet.clone(), cfg.seed.wrapping_add(1))?;
    let (net, net_hist) = pretrain_pesqnet(net0, &dns, &p.0, &p.1, oracle, cfg.pretrain_pesqnet.clone())?;
    let stage1 = finetune_stage1(
        dns.clone(),
        net.clone(),
        &f.0,
        &f.1,
        oracle,
        cfg.finetune1.beta,
        cfg.finetune1.dns.clone(),
        cfg.finetune1.pesqnet.clone(),
    )?;
    Ok(DeskModels {
        pretrained_dns: dns,
        pretrained_pesqnet: net,
        pretrain_dns_history: dns_hist,
        pretrain_pesqnet_history: net_hist,
        stage1,
    })
}
