//! Optimizer, learning-rate schedule and the pretraining and QA training drivers.

mod optim;
mod pretrain;
mod qa;

pub use optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, Schedule};
pub use pretrain::{pretrain_batches, run_pretrain, write_pretrain_log, PretrainConfig, PretrainLog, PretrainSample};
pub use qa::{answer_space, evaluate, run_train_qa, split_by_video, write_qa_log, QaLog, QaRun, QaTrainConfig};
