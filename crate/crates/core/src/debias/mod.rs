//! Unsupervised debiasing: the log-variance + entropy objective, AdamW and
//! the low-rank adapter training loop.

mod loss;
mod optim;
mod train;

pub use crate::model::{AdapterInit, AdapterSet, AdapterTarget, LoraAdapter, Projection};
pub use loss::{
    debias_loss, debias_loss_graph, entropy_graph, entropy_reg, pbm_log_loss, pbm_log_loss_graph, LossTerms,
    Normalization,
};
pub use optim::{AdamW, AdamWConfig};
pub use train::{evaluate, grad_check_loss, instance_loss, train, DebiasConfig, EvalLog, StepLog, TrainLog};
