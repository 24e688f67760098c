//! Staged training: hyperparameters, optimiser and the pipeline driver.

mod checkpoint;
mod config;
mod optim;
mod pipeline;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{hyperparam_table, HyperParams};
pub use optim::{clip_grad_norm, grad_norm, AdamW, ADAM_EPS, BETA1, BETA2};
pub use pipeline::{
    predict_samples, train_pipeline, train_pipeline_cached, AblationFlags, EvalReport, Pack, Stage, StageCache, TrainData, TrainLog, TrainedSystem,
    ARMS,
};
