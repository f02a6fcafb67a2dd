//! Optimization loops for every training phase.

mod alternating;
mod data;
mod optim;
mod phases;
mod steps;

pub use alternating::{
    finetune_stage2, ActiveModel, Alternation, CurvePoint, HashEvent, SelectionPoint, Stage2Config, Stage2Snapshot, Stage2Epoch,
    Stage2Outcome, Stage2Report,
};
pub use data::{minibatches, norm_stats_for, split_train_val, Dataset, PreparedUtterance};
pub use optim::{all_finite, clip_global_norm, Adam, AdamSpec, AdamState, GradAccumulator, Plateau};
pub use phases::{
    finetune_stage1, pesqnet_eval, pretrain_dns, pretrain_pesqnet, DnsObjective, EpochRecord, Objective, PesqNetObjective,
    PesqTargets, PhaseConfig, PhaseState, Stage1Outcome, Trainer,
};
pub use steps::{
    amplitude, batch_mean, dns_estimate, dns_loss_node, dns_utterance_grads, enhance_and_score, enhance_tensor, mse_value,
    pesqnet_score, pesqnet_utterance_grads, spectrum_to_waveform, EnhancedSet,
};
