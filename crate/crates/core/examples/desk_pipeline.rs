//! The whole desk-scale pipeline: both pre-training phases, domain
//! adaptation and the alternating stage with alpha = 0 and the alpha = 1
//! placebo. Takes a few minutes on one core; build with --release.

use dns_pesqnet::config::RunConfig;
use dns_pesqnet::desk::{train_to_stage1, DeskCorpus, DeskData};
use dns_pesqnet::eval::curves_export;
use dns_pesqnet::oracle::SurrogateOracle;
use dns_pesqnet::training::{finetune_stage2, Stage2Config};

fn main() -> dns_pesqnet::error::Result<()> {
    let cfg = RunConfig::desk();
    let oracle = SurrogateOracle::default();
    let data = DeskData::new(&cfg, &DeskCorpus::pretraining(), &DeskCorpus::finetuning())?;
    let models = train_to_stage1(&cfg, &data, &oracle)?;
    for (name, hist) in [
        ("pre-training DNS", &models.pretrain_dns_history),
        ("pre-training PESQNet", &models.pretrain_pesqnet_history),
        ("stage-1 DNS", &models.stage1.dns_history),
        ("stage-1 PESQNet", &models.stage1.pesqnet_history),
    ] {
        let last = hist.last().expect("at least one epoch");
        println!("{name}: {} epochs, validation loss {:.4}", hist.len(), last.val_loss);
    }

    let out_dir = std::env::temp_dir().join("desk_pipeline");
    std::fs::create_dir_all(&out_dir)?;
    let (train, val) = &data.finetune;
    for alpha in [0.0, 1.0] {
        let c = Stage2Config { alpha, ..cfg.finetune2.clone() };
        let out = finetune_stage2(models.stage1.dns.clone(), models.stage1.pesqnet.clone(), train, val, &oracle, c)?;
        let curves = &out.report.curves;
        let (first, last) = (&curves[0], curves.last().unwrap());
        println!(
            "alpha {alpha}: score {:.4} -> {:.4}, PESQNet MAE {:.4} -> {:.4}",
            first.mean_oracle_score, last.mean_oracle_score, first.mae, last.mae
        );
        let path = out_dir.join(format!("curves_alpha{alpha}.csv"));
        curves_export(curves, &path)?;
        println!("  curves in {}", path.display());
    }
    Ok(())
}
