//! Command-line entry points. Every phase writes into its own directory
//! under `paths.runs`, next to the resolved config and the build version.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Preset, RunConfig};
use crate::desk::DeskCorpus;
use crate::error::{Error, Result};
use crate::eval::{curves_export, evaluate, scatter_export};
use crate::fcrn::{enhance_identity, enhance_utterance, Fcrn, NormStats};
use crate::pesqnet::PesqNet;
use crate::synth::{build_corpus, corpus_digest, load_corpus, write_corpus, Manifest, UtteranceRecord};
use crate::training::{
    norm_stats_for, split_train_val, Alternation, Dataset, DnsObjective, EpochRecord, Objective, PesqNetObjective,
    PesqTargets, PhaseConfig, PhaseState, Stage2Snapshot, Trainer,
};
use crate::wav::{read_wav, write_wav};

/// Crate version plus `git describe` of the build.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("DNS_PESQNET_GIT_DESCRIBE"));

pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "VERSION";
pub const COMPLETE_FILE: &str = "COMPLETE";

#[derive(Debug, Parser)]
#[command(name = "dns-pesqnet", version = VERSION, about = "Noise suppression trained through a learned quality estimator")]
pub struct Cli {
    /// TOML run config merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory that relative paths resolve against.
    #[arg(long, global = true)]
    pub workspace: Option<PathBuf>,
    /// Base values: `full` or `desk`.
    #[arg(long, global = true, default_value = "full")]
    pub preset: String,
    /// `dotted.key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mix a corpus from a manifest, or a synthetic one with `--desk`.
    Synth {
        #[arg(long, conflicts_with = "desk")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 48)]
        utterances: usize,
        #[arg(long, default_value_t = 0.0)]
        reverb_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    PretrainDns,
    PretrainPesqnet,
    Finetune1,
    Finetune2 {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// DNS checkpoint; defaults to the stage-2 result for the configured alpha.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Bypass the model: unit mask, STFT and overlap-add only.
        #[arg(long)]
        identity_mask: bool,
    },
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        dns: Option<PathBuf>,
        #[arg(long)]
        pesqnet: Option<PathBuf>,
        /// Per-utterance scatter CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config.
    ShowConfig,
}

/// `error: kind=<kind> msg=<message>` on one line.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={} msg={msg}", e.kind())
}

impl Cli {
    /// Preset, then config file, then flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(Preset::parse(&self.preset)?);
        if let Some(path) = &self.config {
            cfg = cfg.merged_file(path)?;
            if self.workspace.is_none() && cfg.workspace.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.workspace = base.join(&cfg.workspace);
            }
        }
        cfg = cfg.with_overrides(&self.sets)?;
        if let Some(w) = &self.workspace {
            cfg.workspace = w.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Command::Finetune2 { alpha, epochs } = &self.command {
            if let Some(a) = alpha {
                cfg.finetune2.alpha = *a;
            }
            if let Some(e) = epochs {
                cfg.finetune2.epochs = *e;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match cli.command {
        Command::Synth {
            manifest,
            desk,
            utterances,
            reverb_fraction,
            out,
        } => cmd_synth(&cfg, manifest.as_deref(), desk, utterances, reverb_fraction, &out),
        Command::PretrainDns => cmd_pretrain_dns(&cfg),
        Command::PretrainPesqnet => cmd_pretrain_pesqnet(&cfg),
        Command::Finetune1 => cmd_finetune1(&cfg),
        Command::Finetune2 { .. } => cmd_finetune2(&cfg),
        Command::Enhance {
            input,
            output,
            checkpoint,
            identity_mask,
        } => cmd_enhance(&cfg, &input, &output, checkpoint.as_deref(), identity_mask),
        Command::Evaluate {
            corpus,
            dns,
            pesqnet,
            out,
        } => cmd_evaluate(&cfg, corpus.as_deref(), dns.as_deref(), pesqnet.as_deref(), &out),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

/// Claims `dir` for a run described by `resolved`; a different existing
/// description is a conflict. Returns `true` if the run already completed.
pub fn claim_dir(dir: &Path, resolved: &str) -> Result<bool> {
    fs::create_dir_all(dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    if cfg_path.is_file() {
        if fs::read_to_string(&cfg_path)? != resolved {
            return Err(Error::ConfigConflict { path: dir.to_path_buf() });
        }
    } else {
        write_atomic(&cfg_path, resolved.as_bytes())?;
    }
    write_atomic(&dir.join(VERSION_FILE), format!("{VERSION}\n").as_bytes())?;
    Ok(dir.join(COMPLETE_FILE).is_file())
}

fn mark_complete(dir: &Path, summary: &impl Serialize) -> Result<()> {
    write_atomic(&dir.join(COMPLETE_FILE), serde_json::to_string_pretty(summary)?.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if history.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "val_loss", "val_mae", "improved"])?;
    }
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    desk: bool,
    utterances: usize,
    reverb_fraction: f64,
    out: &Path,
) -> Result<()> {
    let out = cfg.resolve(out);
    let (description, records) = match (manifest, desk) {
        (Some(m), _) => {
            let m = cfg.resolve(m);
            let text = fs::read_to_string(&m)
                .map_err(|_| Error::MissingPrerequisite(format!("manifest {}", m.display())))?;
            let parsed = Manifest::parse(&text, m.parent().unwrap_or(Path::new(".")))?;
            (format!("# manifest {}\n{text}", m.display()), build_corpus(&parsed)?)
        }
        (None, true) => {
            let d = DeskCorpus {
                utterances,
                seed: cfg.seed,
                reverb_fraction,
                ..DeskCorpus::default()
            };
            let text = toml::to_string(&d).map_err(|e| Error::Config(vec![e.to_string()]))?;
            (text, d.synthesize()?)
        }
        (None, false) => return Err(Error::InvalidArgument("synth needs --manifest or --desk".into())),
    };
    claim_dir(&out, &description)?;
    write_corpus(&records, &out)?;
    let digest = corpus_digest(&records);
    mark_complete(&out, &serde_json::json!({ "records": records.len(), "digest": digest }))?;
    println!("synth records={} digest={digest} out={}", records.len(), out.display());
    Ok(())
}

fn phase_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.resolve(&cfg.paths.runs).join(name)
}

/// Train/validation split of a corpus directory.
fn load_split(cfg: &RunConfig, corpus: &Path) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>)> {
    let dir = cfg.resolve(corpus);
    if !dir.join(crate::synth::INDEX_FILE).is_file() {
        return Err(Error::MissingPrerequisite(format!("corpus {}", dir.display())));
    }
    split_train_val(load_corpus(&dir)?, cfg.val_fraction)
}

fn load_dns(path: &Path) -> Result<(Fcrn, NormStats)> {
    load_checkpoint(path)?.to_fcrn()
}

fn load_pesqnet(path: &Path) -> Result<PesqNet> {
    load_checkpoint(path)?.to_pesqnet()
}

fn datasets(records: &(Vec<UtteranceRecord>, Vec<UtteranceRecord>), stats: &NormStats, cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        Dataset::prepare(&records.0, stats, &cfg.stft)?,
        Dataset::prepare(&records.1, stats, &cfg.stft)?,
    ))
}

/// Runs one supervised phase with per-epoch resume files, then stores the
/// best-validation parameters as `{tag}.ckpt`.
fn drive<O: Objective>(
    dir: &Path,
    tag: &str,
    mut trainer: Trainer<O>,
    to_ckpt: &dyn Fn(&crate::autograd::ParamSet) -> Result<Checkpoint>,
) -> Result<crate::autograd::ParamSet> {
    let resume = dir.join(format!("{tag}-resume.ckpt"));
    trainer.run(|t, rec| {
        println!(
            "{tag} epoch={} lr={:e} train_loss={:.6} val_loss={:.6}{}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.val_loss,
            rec.val_mae.map_or(String::new(), |m| format!(" val_mae={m:.4}"))
        );
        let mut ck = to_ckpt(t.objective.params())?;
        ck.train_state = Some(serde_json::to_value(t.state())?);
        save_checkpoint(&resume, &ck)
    })?;
    write_history(&dir.join(format!("{tag}_history.csv")), trainer.history())?;
    save_checkpoint(dir.join(format!("{tag}.ckpt")), &to_ckpt(trainer.best_params())?)?;
    if resume.is_file() {
        fs::remove_file(&resume)?;
    }
    Ok(trainer.best_params().clone())
}

fn resume_state(dir: &Path, tag: &str) -> Result<Option<(Checkpoint, PhaseState)>> {
    let path = dir.join(format!("{tag}-resume.ckpt"));
    if !path.is_file() {
        return Ok(None);
    }
    let mut ck = load_checkpoint(&path)?;
    let state = ck
        .train_state
        .take()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", path.display())))?;
    println!("{tag} resuming from {}", path.display());
    Ok(Some((ck, serde_json::from_value(state)?)))
}

fn train_dns_phase(
    dir: &Path,
    tag: &str,
    init: Fcrn,
    stats: &NormStats,
    data: &(Dataset, Dataset),
    beta: f64,
    pc: &PhaseConfig,
) -> Result<Fcrn> {
    let resumed = resume_state(dir, tag)?;
    let (model, state) = match resumed {
        Some((ck, st)) => (ck.to_fcrn()?.0, Some(st)),
        None => (init, None),
    };
    let obj = DnsObjective {
        model: model.clone(),
        train: &data.0,
        val: &data.1,
        beta,
    };
    let trainer = match state {
        Some(st) => Trainer::resume(obj, pc.clone(), st)?,
        None => Trainer::new(obj, pc.clone())?,
    };
    let to_ckpt = |p: &crate::autograd::ParamSet| {
        Checkpoint::from_fcrn(&Fcrn { cfg: model.cfg.clone(), params: p.clone() }, stats)
    };
    let best = drive(dir, tag, trainer, &to_ckpt)?;
    Ok(Fcrn { cfg: model.cfg, params: best })
}

fn train_pesqnet_phase(
    dir: &Path,
    tag: &str,
    init: PesqNet,
    targets: &(PesqTargets, PesqTargets),
    pc: &PhaseConfig,
) -> Result<PesqNet> {
    let (model, state) = match resume_state(dir, tag)? {
        Some((ck, st)) => (ck.to_pesqnet()?, Some(st)),
        None => (init, None),
    };
    let obj = PesqNetObjective {
        model: model.clone(),
        train: &targets.0,
        val: &targets.1,
    };
    let trainer = match state {
        Some(st) => Trainer::resume(obj, pc.clone(), st)?,
        None => Trainer::new(obj, pc.clone())?,
    };
    let to_ckpt = |p: &crate::autograd::ParamSet| Checkpoint::from_pesqnet(&PesqNet { cfg: model.cfg.clone(), params: p.clone() });
    let best = drive(dir, tag, trainer, &to_ckpt)?;
    Ok(PesqNet { cfg: model.cfg, params: best })
}

fn oracle_targets(
    cfg: &RunConfig,
    dns: &Fcrn,
    data: &(Dataset, Dataset),
) -> Result<(PesqTargets, PesqTargets)> {
    let oracle = cfg.oracle.build()?;
    Ok((
        PesqTargets::from_dns(dns, &data.0, oracle.as_ref())?,
        PesqTargets::from_dns(dns, &data.1, oracle.as_ref())?,
    ))
}

fn up_to_date(dir: &Path) {
    println!("up to date: {}", dir.display());
}

fn cmd_pretrain_dns(cfg: &RunConfig) -> Result<()> {
    let dir = phase_dir(cfg, "pretrain-dns");
    let split = load_split(cfg, &cfg.paths.pretrain_corpus)?;
    if claim_dir(&dir, &cfg.to_toml()?)? {
        up_to_date(&dir);
        return Ok(());
    }
    if let Some(r) = split.0.iter().chain(&split.1).find(|r| r.is_reverberant()) {
        return Err(Error::InvalidArgument(format!(
            "pre-training corpus must be reverberation-free; {} is reverberant",
            r.id
        )));
    }
    let stats = norm_stats_for(&split.0, &cfg.stft)?;
    let data = datasets(&split, &stats, cfg)?;
    let init = Fcrn::new(cfg.fcrn.clone(), cfg.seed)?;
    let dns = train_dns_phase(&dir, "dns", init, &stats, &data, 0.0, &cfg.pretrain_dns)?;
    mark_complete(&dir, &serde_json::json!({ "dns_digest": dns.params.digest() }))
}

fn cmd_pretrain_pesqnet(cfg: &RunConfig) -> Result<()> {
    let dir = phase_dir(cfg, "pretrain-pesqnet");
    let dns_path = phase_dir(cfg, "pretrain-dns").join("dns.ckpt");
    let (dns, stats) = load_dns(&dns_path)?;
    if claim_dir(&dir, &cfg.to_toml()?)? {
        up_to_date(&dir);
        return Ok(());
    }
    let split = load_split(cfg, &cfg.paths.pretrain_corpus)?;
    let data = datasets(&split, &stats, cfg)?;
    let targets = oracle_targets(cfg, &dns, &data)?;
    let init = PesqNet::new(cfg.pesqnet.clone(), cfg.seed.wrapping_add(1))?;
    let net = train_pesqnet_phase(&dir, "pesqnet", init, &targets, &cfg.pretrain_pesqnet)?;
    mark_complete(
        &dir,
        &serde_json::json!({ "pesqnet_digest": net.params.digest(), "dns_digest": dns.params.digest() }),
    )
}

fn cmd_finetune1(cfg: &RunConfig) -> Result<()> {
    let dir = phase_dir(cfg, "finetune1");
    let (dns0, stats) = load_dns(&phase_dir(cfg, "pretrain-dns").join("dns.ckpt"))?;
    let net0 = load_pesqnet(&phase_dir(cfg, "pretrain-pesqnet").join("pesqnet.ckpt"))?;
    if claim_dir(&dir, &cfg.to_toml()?)? {
        up_to_date(&dir);
        return Ok(());
    }
    let split = load_split(cfg, &cfg.paths.finetune_corpus)?;
    let data = datasets(&split, &stats, cfg)?;
    let dns_path = dir.join("dns.ckpt");
    let dns = if dns_path.is_file() {
        load_dns(&dns_path)?.0
    } else {
        train_dns_phase(&dir, "dns", dns0, &stats, &data, cfg.finetune1.beta, &cfg.finetune1.dns)?
    };
    let targets = oracle_targets(cfg, &dns, &data)?;
    let net = train_pesqnet_phase(&dir, "pesqnet", net0, &targets, &cfg.finetune1.pesqnet)?;
    mark_complete(
        &dir,
        &serde_json::json!({ "dns_digest": dns.params.digest(), "pesqnet_digest": net.params.digest() }),
    )
}

fn stage2_dir(cfg: &RunConfig) -> PathBuf {
    phase_dir(cfg, &format!("finetune2-alpha{}", cfg.finetune2.alpha))
}

fn cmd_finetune2(cfg: &RunConfig) -> Result<()> {
    let dir = stage2_dir(cfg);
    let src = phase_dir(cfg, "finetune1");
    let (dns, stats) = load_dns(&src.join("dns.ckpt"))?;
    let net = load_pesqnet(&src.join("pesqnet.ckpt"))?;
    if claim_dir(&dir, &cfg.to_toml()?)? {
        up_to_date(&dir);
        return Ok(());
    }
    let split = load_split(cfg, &cfg.paths.finetune_corpus)?;
    let (train, val) = datasets(&split, &stats, cfg)?;
    let oracle = cfg.oracle.build()?;
    let snap_path = dir.join("snapshot.json");
    let mut alt = if snap_path.is_file() {
        let snap: Stage2Snapshot = serde_json::from_str(&fs::read_to_string(&snap_path)?)?;
        println!("finetune2 resuming after tau={}", snap.tau);
        Alternation::resume(snap, dns, net, &train, &val, oracle.as_ref(), cfg.finetune2.clone())?
    } else {
        Alternation::new(dns, net, &train, &val, oracle.as_ref(), cfg.finetune2.clone())?
    };
    while !alt.finished() {
        alt.step_epoch()?;
        let c = alt.report().curves.last().expect("one point per epoch");
        println!(
            "finetune2 tau={} j_total={:.6} mae={:.4} mean_oracle_score={:.4}",
            c.tau, c.j_total, c.mae, c.mean_oracle_score
        );
        write_atomic(&snap_path, serde_json::to_string(&alt.snapshot())?.as_bytes())?;
    }
    let out = alt.into_outcome();
    save_checkpoint(dir.join("dns.ckpt"), &Checkpoint::from_fcrn(&out.dns, &stats)?)?;
    save_checkpoint(dir.join("pesqnet.ckpt"), &Checkpoint::from_pesqnet(&out.pesqnet)?)?;
    curves_export(&out.report.curves, dir.join("curves.csv"))?;
    write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&out.report)?.as_bytes())?;
    fs::remove_file(&snap_path)?;
    println!(
        "finetune2 best_tau={} dns_updates={} pesqnet_updates={}",
        out.report.best_tau, out.report.dns_updates, out.report.pesqnet_updates
    );
    mark_complete(
        &dir,
        &serde_json::json!({
            "best_tau": out.report.best_tau,
            "dns_digest": out.dns.params.digest(),
            "pesqnet_digest": out.pesqnet.params.digest(),
        }),
    )
}

fn cmd_enhance(cfg: &RunConfig, input: &Path, output: &Path, ckpt: Option<&Path>, identity: bool) -> Result<()> {
    let y = read_wav(cfg.resolve(input))?;
    let out = if identity {
        enhance_identity(&y, &cfg.stft)?
    } else {
        let path = ckpt.map_or_else(|| stage2_dir(cfg).join("dns.ckpt"), |p| cfg.resolve(p));
        let (dns, stats) = load_dns(&path)?;
        enhance_utterance(&dns, &stats, &y, &cfg.stft)?
    };
    write_wav(cfg.resolve(output), &out)?;
    println!("enhance samples={} out={}", out.len(), cfg.resolve(output).display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, corpus: Option<&Path>, dns: Option<&Path>, pesqnet: Option<&Path>, out: &Path) -> Result<()> {
    let stage2 = stage2_dir(cfg);
    let dns_path = dns.map_or_else(|| stage2.join("dns.ckpt"), |p| cfg.resolve(p));
    let net_path = pesqnet.map_or_else(|| stage2.join("pesqnet.ckpt"), |p| cfg.resolve(p));
    let (model, stats) = load_dns(&dns_path)?;
    let net = load_pesqnet(&net_path)?;
    let dir = cfg.resolve(corpus.unwrap_or(&cfg.paths.finetune_corpus));
    if !dir.join(crate::synth::INDEX_FILE).is_file() {
        return Err(Error::MissingPrerequisite(format!("corpus {}", dir.display())));
    }
    let records = load_corpus(&dir)?;
    let oracle = cfg.oracle.build()?;
    let report = evaluate(&model, &stats, &records, oracle.as_ref(), Some(&net), &cfg.stft)?;
    let out = cfg.resolve(out);
    claim_dir(out.parent().unwrap_or(Path::new(".")), &cfg.to_toml()?)?;
    scatter_export(&report, &out)?;
    print!("{}", report.summary());
    println!("evaluate rows={} out={}", report.rows.len(), out.display());
    Ok(())
}
