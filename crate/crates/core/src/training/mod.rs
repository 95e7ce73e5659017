//! Optimizer, schedules, checkpoints, synthetic data, and the training loops.

pub mod checkpoint;
pub mod optim;
pub mod synth;
pub mod pretrain;
pub mod finetune;
