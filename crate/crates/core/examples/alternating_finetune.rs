//! The alternating protocol on a toy corpus: odd epochs take one averaged
//! DNS step, even epochs update PESQNet per minibatch.

use dns_pesqnet::desk::{tiny_fcrn, tiny_pesqnet, DeskCorpus};
use dns_pesqnet::dsp::StftConfig;
use dns_pesqnet::fcrn::Fcrn;
use dns_pesqnet::oracle::SurrogateOracle;
use dns_pesqnet::pesqnet::PesqNet;
use dns_pesqnet::training::{finetune_stage2, norm_stats_for, split_train_val, ActiveModel, Dataset, Stage2Config};

fn main() -> dns_pesqnet::error::Result<()> {
    let stft = StftConfig::default();
    let records = DeskCorpus { utterances: 8, seconds: 0.3, ..DeskCorpus::default() }.synthesize()?;
    let (train, val) = split_train_val(records, 0.25)?;
    let stats = norm_stats_for(&train, &stft)?;
    let train = Dataset::prepare(&train, &stats, &stft)?;
    let val = Dataset::prepare(&val, &stats, &stft)?;

    let cfg = Stage2Config {
        dns_lr: 1e-3,
        pesqnet_lr: 1e-3,
        ..Stage2Config::default()
    };
    let out = finetune_stage2(
        Fcrn::new(tiny_fcrn(), 0)?,
        PesqNet::new(tiny_pesqnet(), 1)?,
        &train,
        &val,
        &SurrogateOracle::default(),
        cfg,
    )?;
    let r = &out.report;
    println!("DNS updates {}, PESQNet updates {}", r.dns_updates, r.pesqnet_updates);
    println!("tau  trained  j_total    mae  score");
    for (c, e) in r.curves.iter().zip(std::iter::once(None).chain(r.epochs.iter().map(Some))) {
        let who = match e.map(|e| &e.active) {
            Some(ActiveModel::Dns) => "dns",
            Some(ActiveModel::Pesqnet) => "pesqnet",
            None => "-",
        };
        println!("{:3}  {who:7}  {:7.4}  {:.4}  {:.4}", c.tau, c.j_total, c.mae, c.mean_oracle_score);
    }
    println!("selected DNS from tau {}", r.best_tau);
    Ok(())
}
