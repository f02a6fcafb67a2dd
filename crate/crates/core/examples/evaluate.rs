//! Briefly pre-trains a DNS and a PESQNet, then scores noisy and enhanced
//! test records and writes the scatter table.

use dns_pesqnet::config::RunConfig;
use dns_pesqnet::desk::{tiny_fcrn, tiny_pesqnet, DeskCorpus};
use dns_pesqnet::eval::{evaluate, scatter_export};
use dns_pesqnet::fcrn::Fcrn;
use dns_pesqnet::oracle::SurrogateOracle;
use dns_pesqnet::pesqnet::PesqNet;
use dns_pesqnet::training::{norm_stats_for, pretrain_dns, pretrain_pesqnet, split_train_val, Dataset};

fn main() -> dns_pesqnet::error::Result<()> {
    let cfg = RunConfig::desk();
    let oracle = SurrogateOracle::default();
    let records = DeskCorpus { utterances: 16, ..DeskCorpus::pretraining() }.synthesize()?;
    let (train, val) = split_train_val(records, 0.25)?;
    let stats = norm_stats_for(&train, &cfg.stft)?;
    let (tr, va) = (Dataset::prepare(&train, &stats, &cfg.stft)?, Dataset::prepare(&val, &stats, &cfg.stft)?);

    let mut phase = cfg.pretrain_dns.clone();
    phase.max_epochs = Some(4);
    let (dns, _) = pretrain_dns(Fcrn::new(tiny_fcrn(), 0)?, &tr, &va, phase)?;
    let mut phase = cfg.pretrain_pesqnet.clone();
    phase.max_epochs = Some(6);
    let (net, _) = pretrain_pesqnet(PesqNet::new(tiny_pesqnet(), 1)?, &dns, &tr, &va, &oracle, phase)?;

    let test = DeskCorpus { utterances: 6, seed: 99, reverb_fraction: 0.5, ..DeskCorpus::default() }.synthesize()?;
    let report = evaluate(&dns, &stats, &test, &oracle, Some(&net), &cfg.stft)?;
    print!("{}", report.summary());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("scatter.csv");
    scatter_export(&report, &path)?;
    print!("{}", std::fs::read_to_string(&path)?);
    Ok(())
}
