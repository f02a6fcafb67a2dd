//! Supervised phases: DNS and PESQNet pre-training and the first
//! fine-tuning stage. All share one epoch loop with a plateau schedule.

use serde::{Deserialize, Serialize};

use super::data::{minibatches, Dataset};
use super::optim::{clip_global_norm, Adam, AdamSpec, AdamState, Plateau};
use super::steps::{batch_mean, check_finite, dns_utterance_grads, enhance_and_score, mse_value, enhance_tensor, pesqnet_score, pesqnet_utterance_grads, EnhancedSet};
use crate::autograd::{ParamSet, Tensor};
use crate::checkpoint::{params_from_records, params_to_records, NamedTensor};
use crate::error::{Error, Result};
use crate::fcrn::Fcrn;
use crate::losses::{loss_pesq, LossWeights};
use crate::oracle::QualityOracle;
use crate::pesqnet::PesqNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub stop_lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub batch_size: usize,
    /// Hard cap on epochs in addition to the learning-rate stop.
    pub max_epochs: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamSpec,
}

impl PhaseConfig {
    fn with_rates(lr: f64, stop_lr: f64) -> Self {
        Self {
            lr,
            stop_lr,
            patience: 5,
            factor: 0.5,
            batch_size: 3,
            max_epochs: None,
            seed: 0,
            clip_grad_norm: None,
            adam: AdamSpec::default(),
        }
    }

    pub fn pretrain_dns() -> Self {
        Self::with_rates(1e-4, 1e-5)
    }

    pub fn pretrain_pesqnet() -> Self {
        Self::with_rates(2e-4, 1e-5)
    }

    pub fn stage1_dns() -> Self {
        Self::with_rates(2e-5, 1e-6)
    }

    pub fn stage1_pesqnet() -> Self {
        Self::with_rates(5e-5, 1e-6)
    }

    pub fn validate(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("{prefix}.lr must be positive"));
        }
        if !(self.stop_lr > 0.0) {
            errs.push(format!("{prefix}.stop_lr must be positive"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{prefix}.batch_size must be positive"));
        }
        if self.patience == 0 {
            errs.push(format!("{prefix}.patience must be positive"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            errs.push(format!("{prefix}.factor must lie in (0, 1)"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean absolute error on the validation set (PESQNet phases only).
    pub val_mae: Option<f64>,
    pub improved: bool,
}

/// Resumable state of a supervised phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub epoch: usize,
    pub plateau: Plateau,
    pub adam: AdamState,
    pub best: Vec<NamedTensor>,
    pub history: Vec<EpochRecord>,
}

/// What a supervised phase optimizes.
pub trait Objective {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn train_len(&self) -> usize;
    /// Mean loss and mean gradient over the given training items.
    fn batch(&self, indices: &[usize]) -> (f64, Vec<Tensor>);
    /// Validation loss and, where meaningful, validation MAE.
    fn validate(&self) -> Result<(f64, Option<f64>)>;
}

/// DNS trained on `J_mse` with a fixed `beta`.
pub struct DnsObjective<'a> {
    pub model: Fcrn,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub beta: f64,
}

impl Objective for DnsObjective<'_> {
    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch(&self, indices: &[usize]) -> (f64, Vec<Tensor>) {
        let w = LossWeights {
            alpha: 1.0,
            beta: self.beta,
        };
        batch_mean(indices, |i| dns_utterance_grads(&self.model, None, &self.train.items[i], w))
    }

    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let total: f64 = self
            .val
            .items
            .iter()
            .map(|u| mse_value(&enhance_tensor(&self.model, u), u, self.beta))
            .sum();
        Ok((total / self.val.len() as f64, None))
    }
}

/// Fixed PESQNet inputs and oracle targets.
#[derive(Debug, Clone)]
pub struct PesqTargets {
    pub amplitudes: Vec<Tensor>,
    pub scores: Vec<f64>,
}

impl From<EnhancedSet> for PesqTargets {
    fn from(e: EnhancedSet) -> Self {
        Self {
            amplitudes: e.amplitudes,
            scores: e.oracle,
        }
    }
}

impl PesqTargets {
    /// Targets from a frozen DNS: its enhanced outputs scored by the oracle.
    pub fn from_dns(fcrn: &Fcrn, data: &Dataset, oracle: &dyn QualityOracle) -> Result<Self> {
        Ok(enhance_and_score(fcrn, data, oracle)?.into())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub struct PesqNetObjective<'a> {
    pub model: PesqNet,
    pub train: &'a PesqTargets,
    pub val: &'a PesqTargets,
}

/// Mean `J_pesq` and MAE of `net` on `t`.
pub fn pesqnet_eval(net: &PesqNet, t: &PesqTargets) -> (f64, f64) {
    let mut loss = 0.0;
    let mut mae = 0.0;
    for (a, &y) in t.amplitudes.iter().zip(&t.scores) {
        let s = pesqnet_score(net, a);
        loss += loss_pesq(s, y);
        mae += (s - y).abs();
    }
    let n = t.len() as f64;
    (loss / n, mae / n)
}

impl Objective for PesqNetObjective<'_> {
    fn params(&self) -> &ParamSet {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.model.params
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch(&self, indices: &[usize]) -> (f64, Vec<Tensor>) {
        batch_mean(indices, |i| {
            pesqnet_utterance_grads(&self.model, &self.train.amplitudes[i], self.train.scores[i])
        })
    }

    fn validate(&self) -> Result<(f64, Option<f64>)> {
        let (loss, mae) = pesqnet_eval(&self.model, self.val);
        Ok((loss, Some(mae)))
    }
}

/// Epoch loop with per-minibatch Adam updates, plateau schedule and
/// best-validation tracking.
pub struct Trainer<O: Objective> {
    pub objective: O,
    pub cfg: PhaseConfig,
    opt: Adam,
    plateau: Plateau,
    epoch: usize,
    best: ParamSet,
    history: Vec<EpochRecord>,
}

impl<O: Objective> Trainer<O> {
    pub fn new(objective: O, cfg: PhaseConfig) -> Result<Self> {
        let errs = cfg.validate("phase");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        if objective.train_len() == 0 {
            return Err(Error::Empty("training set".into()));
        }
        let mut plateau = Plateau::new(cfg.lr, cfg.stop_lr);
        plateau.patience = cfg.patience;
        plateau.factor = cfg.factor;
        Ok(Self {
            opt: Adam::new(objective.params(), cfg.lr, cfg.adam),
            best: objective.params().clone(),
            plateau,
            epoch: 0,
            history: Vec::new(),
            objective,
            cfg,
        })
    }

    /// Continues from a saved state; the objective must hold the parameters
    /// that were current when the state was taken.
    pub fn resume(objective: O, cfg: PhaseConfig, state: PhaseState) -> Result<Self> {
        let mut t = Self::new(objective, cfg)?;
        t.opt = Adam::from_state(state.adam, t.objective.params())?;
        t.plateau = state.plateau;
        t.epoch = state.epoch;
        t.best = params_from_records(state.best)?;
        if !t.best.same_layout(t.objective.params()) {
            return Err(Error::Checkpoint("best parameters do not match the model".into()));
        }
        t.history = state.history;
        Ok(t)
    }

    pub fn state(&self) -> PhaseState {
        PhaseState {
            epoch: self.epoch,
            plateau: self.plateau.clone(),
            adam: self.opt.to_state(),
            best: params_to_records(&self.best),
            history: self.history.clone(),
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best_params(&self) -> &ParamSet {
        &self.best
    }

    pub fn finished(&self) -> bool {
        self.plateau.should_stop() || self.cfg.max_epochs.is_some_and(|m| self.epoch >= m)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.plateau.lr;
        self.opt.lr = lr;
        let batches = minibatches(self.objective.train_len(), self.cfg.batch_size, self.cfg.seed, self.epoch);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (loss, mut grads) = self.objective.batch(idx);
            check_finite(loss, &grads, b)?;
            if let Some(max) = self.cfg.clip_grad_norm {
                clip_global_norm(&mut grads, max);
            }
            self.opt.step(self.objective.params_mut(), &grads);
            total += loss;
        }
        let (val_loss, val_mae) = self.objective.validate()?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "validation loss".into(),
                minibatch: batches.len(),
            });
        }
        let improved = self.plateau.observe(val_loss);
        if improved {
            self.best = self.objective.params().clone();
        }
        self.epoch += 1;
        let rec = EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss: total / batches.len() as f64,
            val_loss,
            val_mae,
            improved,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs until the schedule stops; `on_epoch` sees each finished epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }
}

fn require_dry(data: &Dataset, what: &str) -> Result<()> {
    if let Some(u) = data.items.iter().find(|u| u.reverberant) {
        return Err(Error::InvalidArgument(format!(
            "{what} expects a corpus without reverberation; {} is reverberant",
            u.id
        )));
    }
    Ok(())
}

/// DNS pre-training: `J_mse` with `beta = 0` on a reverberation-free corpus.
/// Returns the best-validation model.
pub fn pretrain_dns(model: Fcrn, train: &Dataset, val: &Dataset, cfg: PhaseConfig) -> Result<(Fcrn, Vec<EpochRecord>)> {
    require_dry(train, "DNS pre-training")?;
    val.require_nonempty("validation")?;
    let mut t = Trainer::new(
        DnsObjective {
            model,
            train,
            val,
            beta: 0.0,
        },
        cfg,
    )?;
    t.run(|_, _| Ok(()))?;
    let mut best = t.objective.model.clone();
    best.params = t.best_params().clone();
    Ok((best, t.history().to_vec()))
}

/// PESQNet training against a frozen DNS whose outputs are scored by the oracle.
pub fn pretrain_pesqnet(
    net: PesqNet,
    dns: &Fcrn,
    train: &Dataset,
    val: &Dataset,
    oracle: &dyn QualityOracle,
    cfg: PhaseConfig,
) -> Result<(PesqNet, Vec<EpochRecord>)> {
    val.require_nonempty("validation")?;
    let tt = PesqTargets::from_dns(dns, train, oracle)?;
    let vt = PesqTargets::from_dns(dns, val, oracle)?;
    let mut t = Trainer::new(
        PesqNetObjective {
            model: net,
            train: &tt,
            val: &vt,
        },
        cfg,
    )?;
    t.run(|_, _| Ok(()))?;
    let mut best = t.objective.model.clone();
    best.params = t.best_params().clone();
    Ok((best, t.history().to_vec()))
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub dns: Fcrn,
    pub pesqnet: PesqNet,
    pub dns_history: Vec<EpochRecord>,
    pub pesqnet_history: Vec<EpochRecord>,
}

/// Domain adaptation: DNS on `J_mse(beta)`, then PESQNet against the adapted DNS.
#[allow(clippy::too_many_arguments)]
pub fn finetune_stage1(
    dns: Fcrn,
    net: PesqNet,
    train: &Dataset,
    val: &Dataset,
    oracle: &dyn QualityOracle,
    beta: f64,
    dns_cfg: PhaseConfig,
    pesqnet_cfg: PhaseConfig,
) -> Result<Stage1Outcome> {
    val.require_nonempty("validation")?;
    let mut t = Trainer::new(
        DnsObjective {
            model: dns,
            train,
            val,
            beta,
        },
        dns_cfg,
    )?;
    t.run(|_, _| Ok(()))?;
    let mut adapted = t.objective.model.clone();
    adapted.params = t.best_params().clone();
    let dns_history = t.history().to_vec();
    let (pesqnet, pesqnet_history) = pretrain_pesqnet(net, &adapted, train, val, oracle, pesqnet_cfg)?;
    Ok(Stage1Outcome {
        dns: adapted,
        pesqnet,
        dns_history,
        pesqnet_history,
    })
}
