//! Replay, twin critics and the KL-regularized actor-critic loop.

mod critic;
mod replay;
mod train;

pub use critic::{q_loss_and_grad, q_loss_and_grad_with_noise, target_update, CriticDiagnostics, CriticPair, CriticStep};
pub use replay::{ReplayBuffer, Transition, TransitionBatch};
pub use train::{
    evaluate, train, write_metrics_csv, write_pretrain_csv, Checkpoint, EvalResult, MetricsRow, PretrainRow,
    RunArtifacts, TrainConfig, TrainError, METRICS_HEADER,
};
