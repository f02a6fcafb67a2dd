//! Alternating fine-tuning: odd epochs train the DNS against a frozen
//! PESQNet with one averaged update per epoch, even epochs train the PESQNet
//! against the frozen DNS with per-minibatch updates.

use serde::{Deserialize, Serialize};

use super::data::{minibatches, Dataset};
use super::optim::{Adam, AdamSpec, AdamState, GradAccumulator};
use super::steps::{batch_mean, check_finite, dns_utterance_grads, enhance_and_score, mse_value, pesqnet_score, pesqnet_utterance_grads, EnhancedSet};
use crate::autograd::Tensor;
use crate::checkpoint::{params_from_records, params_to_records, NamedTensor};
use crate::error::{Error, Result};
use crate::fcrn::Fcrn;
use crate::losses::{loss_pesqnet, LossWeights};
use crate::oracle::QualityOracle;
use crate::pesqnet::{PesqNet, PESQ_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub alpha: f64,
    pub beta: f64,
    pub dns_lr: f64,
    pub pesqnet_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Record both parameter digests after every minibatch.
    #[serde(default)]
    pub track_minibatch_hashes: bool,
    #[serde(default)]
    pub adam: AdamSpec,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.9,
            dns_lr: 1e-6,
            pesqnet_lr: 2e-6,
            epochs: 25,
            batch_size: 3,
            seed: 0,
            track_minibatch_hashes: false,
            adam: AdamSpec::default(),
        }
    }
}

impl Stage2Config {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.weights().validate() {
            errs.push(e.to_string());
        }
        if !(self.dns_lr > 0.0) || !(self.pesqnet_lr > 0.0) {
            errs.push("finetune2 learning rates must be positive".into());
        }
        if self.epochs == 0 {
            errs.push("finetune2.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            errs.push("finetune2.batch_size must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveModel {
    Dns,
    Pesqnet,
}

impl ActiveModel {
    pub fn for_epoch(tau: usize) -> Self {
        if tau % 2 == 1 {
            ActiveModel::Dns
        } else {
            ActiveModel::Pesqnet
        }
    }
}

/// Training-set measurements after epoch `tau` (`tau = 0` is the start).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: usize,
    pub j_total: f64,
    pub mae: f64,
    pub mean_oracle_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashEvent {
    pub tau: usize,
    /// `None` for epoch boundaries.
    pub minibatch: Option<usize>,
    pub dns: String,
    pub pesqnet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub tau: usize,
    pub active: ActiveModel,
    /// Mean of the minibatch losses of the active model.
    pub loss: f64,
    pub minibatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub tau: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub curves: Vec<CurvePoint>,
    pub epochs: Vec<Stage2Epoch>,
    pub hashes: Vec<HashEvent>,
    pub selection: Vec<SelectionPoint>,
    pub dns_updates: usize,
    pub pesqnet_updates: usize,
    pub best_tau: usize,
}

/// Everything needed to continue an alternating run after epoch `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Snapshot {
    pub tau: usize,
    pub dns: Vec<NamedTensor>,
    pub pesqnet: Vec<NamedTensor>,
    pub dns_adam: AdamState,
    pub pesqnet_adam: AdamState,
    pub best_dns: Vec<NamedTensor>,
    pub best_pesqnet: Vec<NamedTensor>,
    pub best_val_loss: f64,
    pub awaiting_pair: bool,
    pub report: Stage2Report,
}

/// The alternating run as an explicit state machine over `tau`.
pub struct Alternation<'a> {
    pub cfg: Stage2Config,
    dns: Fcrn,
    net: PesqNet,
    dns_opt: Adam,
    net_opt: Adam,
    train: &'a Dataset,
    val: &'a Dataset,
    oracle: &'a dyn QualityOracle,
    tau: usize,
    /// Training set enhanced by the current DNS, with oracle scores.
    enhanced: EnhancedSet,
    best: (Fcrn, PesqNet, f64),
    awaiting_pair: bool,
    last_dns_gradient: Option<Vec<Tensor>>,
    report: Stage2Report,
}

impl<'a> Alternation<'a> {
    /// Evaluates the starting point (`tau = 0`) and prepares the first epoch.
    pub fn new(
        dns: Fcrn,
        net: PesqNet,
        train: &'a Dataset,
        val: &'a Dataset,
        oracle: &'a dyn QualityOracle,
        cfg: Stage2Config,
    ) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        train.require_nonempty("training")?;
        val.require_nonempty("validation")?;
        let enhanced = enhance_and_score(&dns, train, oracle)?;
        let mut a = Self {
            dns_opt: Adam::new(&dns.params, cfg.dns_lr, cfg.adam),
            net_opt: Adam::new(&net.params, cfg.pesqnet_lr, cfg.adam),
            best: (dns.clone(), net.clone(), f64::INFINITY),
            dns,
            net,
            train,
            val,
            oracle,
            tau: 0,
            enhanced,
            awaiting_pair: false,
            last_dns_gradient: None,
            report: Stage2Report::default(),
            cfg,
        };
        a.record_curve();
        a.select()?;
        Ok(a)
    }

    pub fn snapshot(&self) -> Stage2Snapshot {
        Stage2Snapshot {
            tau: self.tau,
            dns: params_to_records(&self.dns.params),
            pesqnet: params_to_records(&self.net.params),
            dns_adam: self.dns_opt.to_state(),
            pesqnet_adam: self.net_opt.to_state(),
            best_dns: params_to_records(&self.best.0.params),
            best_pesqnet: params_to_records(&self.best.1.params),
            best_val_loss: self.best.2,
            awaiting_pair: self.awaiting_pair,
            report: self.report.clone(),
        }
    }

    /// Continues from `snap`; `dns` and `net` supply the model configurations.
    pub fn resume(
        snap: Stage2Snapshot,
        dns: Fcrn,
        net: PesqNet,
        train: &'a Dataset,
        val: &'a Dataset,
        oracle: &'a dyn QualityOracle,
        cfg: Stage2Config,
    ) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let load = |records: Vec<NamedTensor>, like: &crate::autograd::ParamSet| {
            let p = params_from_records(records)?;
            if !p.same_layout(like) {
                return Err(Error::Checkpoint("stage-2 snapshot does not match the models".into()));
            }
            Ok(p)
        };
        let mut cur_dns = dns.clone();
        cur_dns.params = load(snap.dns, &dns.params)?;
        let mut cur_net = net.clone();
        cur_net.params = load(snap.pesqnet, &net.params)?;
        let mut best_dns = dns.clone();
        best_dns.params = load(snap.best_dns, &dns.params)?;
        let mut best_net = net.clone();
        best_net.params = load(snap.best_pesqnet, &net.params)?;
        Ok(Self {
            dns_opt: Adam::from_state(snap.dns_adam, &cur_dns.params)?,
            net_opt: Adam::from_state(snap.pesqnet_adam, &cur_net.params)?,
            enhanced: enhance_and_score(&cur_dns, train, oracle)?,
            dns: cur_dns,
            net: cur_net,
            train,
            val,
            oracle,
            tau: snap.tau,
            best: (best_dns, best_net, snap.best_val_loss),
            awaiting_pair: snap.awaiting_pair,
            last_dns_gradient: None,
            report: snap.report,
            cfg,
        })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn finished(&self) -> bool {
        self.tau >= self.cfg.epochs
    }

    pub fn dns(&self) -> &Fcrn {
        &self.dns
    }

    pub fn pesqnet(&self) -> &PesqNet {
        &self.net
    }

    pub fn report(&self) -> &Stage2Report {
        &self.report
    }

    /// Averaged gradient applied by the most recent DNS update.
    pub fn last_dns_gradient(&self) -> Option<&[Tensor]> {
        self.last_dns_gradient.as_deref()
    }

    fn hash_event(&mut self, minibatch: Option<usize>) {
        self.report.hashes.push(HashEvent {
            tau: self.tau,
            minibatch,
            dns: self.dns.params.digest(),
            pesqnet: self.net.params.digest(),
        });
    }

    fn record_curve(&mut self) {
        let w = self.cfg.weights();
        let n = self.train.len() as f64;
        let (mut j, mut mae, mut score) = (0.0, 0.0, 0.0);
        for ((est, amp), (&y, utt)) in self
            .enhanced
            .estimates
            .iter()
            .zip(&self.enhanced.amplitudes)
            .zip(self.enhanced.oracle.iter().zip(&self.train.items))
        {
            let s = pesqnet_score(&self.net, amp);
            j += w.alpha * mse_value(est, utt, w.beta) + (1.0 - w.alpha) * loss_pesqnet(s);
            mae += (s - y).abs();
            score += y;
        }
        self.report.curves.push(CurvePoint {
            tau: self.tau,
            j_total: j / n,
            mae: mae / n,
            mean_oracle_score: score / n,
        });
    }

    /// Validation ranking with the oracle in place of the PESQNet estimate.
    fn select(&mut self) -> Result<()> {
        let w = self.cfg.weights();
        let v = enhance_and_score(&self.dns, self.val, self.oracle)?;
        let loss = v
            .estimates
            .iter()
            .zip(&v.oracle)
            .zip(&self.val.items)
            .map(|((est, &y), utt)| w.alpha * mse_value(est, utt, w.beta) + (1.0 - w.alpha) * (y - PESQ_MAX).powi(2))
            .sum::<f64>()
            / self.val.len() as f64;
        self.report.selection.push(SelectionPoint {
            tau: self.tau,
            val_loss: loss,
        });
        if loss < self.best.2 {
            self.best = (self.dns.clone(), self.net.clone(), loss);
            self.report.best_tau = self.tau;
            self.awaiting_pair = self.tau > 0;
        }
        Ok(())
    }

    fn dns_epoch(&mut self, batches: &[Vec<usize>]) -> Result<f64> {
        let w = self.cfg.weights();
        let net = (w.alpha < 1.0).then_some(&self.net);
        let mut acc = GradAccumulator::new();
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (loss, grads) = batch_mean(idx, |i| dns_utterance_grads(&self.dns, net, &self.train.items[i], w));
            check_finite(loss, &grads, b)?;
            acc.add(&grads);
            total += loss;
            if self.cfg.track_minibatch_hashes {
                self.report.hashes.push(HashEvent {
                    tau: self.tau,
                    minibatch: Some(b),
                    dns: self.dns.params.digest(),
                    pesqnet: self.net.params.digest(),
                });
            }
        }
        let g = acc.finalize()?;
        check_finite(total, &g, batches.len().saturating_sub(1))?;
        self.dns_opt.step(&mut self.dns.params, &g);
        self.last_dns_gradient = Some(g);
        self.report.dns_updates += 1;
        Ok(total / batches.len() as f64)
    }

    fn pesqnet_epoch(&mut self, batches: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (loss, grads) = batch_mean(idx, |i| {
                pesqnet_utterance_grads(&self.net, &self.enhanced.amplitudes[i], self.enhanced.oracle[i])
            });
            check_finite(loss, &grads, b)?;
            self.net_opt.step(&mut self.net.params, &grads);
            self.report.pesqnet_updates += 1;
            total += loss;
            if self.cfg.track_minibatch_hashes {
                self.hash_event(Some(b));
            }
        }
        Ok(total / batches.len() as f64)
    }

    /// Runs epoch `tau + 1`.
    pub fn step_epoch(&mut self) -> Result<&Stage2Epoch> {
        if self.finished() {
            return Err(Error::InvalidArgument("alternating run already finished".into()));
        }
        self.tau += 1;
        let active = ActiveModel::for_epoch(self.tau);
        let batches = minibatches(self.train.len(), self.cfg.batch_size, self.cfg.seed, self.tau);
        self.hash_event(None);
        let loss = match active {
            ActiveModel::Dns => self.dns_epoch(&batches)?,
            ActiveModel::Pesqnet => self.pesqnet_epoch(&batches)?,
        };
        self.hash_event(None);
        if active == ActiveModel::Dns {
            self.enhanced = enhance_and_score(&self.dns, self.train, self.oracle)?;
        }
        self.record_curve();
        match active {
            ActiveModel::Dns => self.select()?,
            ActiveModel::Pesqnet if self.awaiting_pair => {
                self.best.1 = self.net.clone();
                self.awaiting_pair = false;
            }
            ActiveModel::Pesqnet => {}
        }
        self.report.epochs.push(Stage2Epoch {
            tau: self.tau,
            active,
            loss,
            minibatches: batches.len(),
        });
        Ok(self.report.epochs.last().unwrap())
    }

    /// Best-validation DNS and the PESQNet trained against it.
    pub fn best(&self) -> (&Fcrn, &PesqNet) {
        (&self.best.0, &self.best.1)
    }

    pub fn into_outcome(self) -> Stage2Outcome {
        Stage2Outcome {
            dns: self.best.0,
            pesqnet: self.best.1,
            final_dns: self.dns,
            final_pesqnet: self.net,
            report: self.report,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub dns: Fcrn,
    pub pesqnet: PesqNet,
    pub final_dns: Fcrn,
    pub final_pesqnet: PesqNet,
    pub report: Stage2Report,
}

pub fn finetune_stage2(
    dns: Fcrn,
    net: PesqNet,
    train: &Dataset,
    val: &Dataset,
    oracle: &dyn QualityOracle,
    cfg: Stage2Config,
) -> Result<Stage2Outcome> {
    let mut a = Alternation::new(dns, net, train, val, oracle, cfg)?;
    while !a.finished() {
        a.step_epoch()?;
    }
    Ok(a.into_outcome())
}
