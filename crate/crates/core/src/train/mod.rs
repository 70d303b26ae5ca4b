//! Backbone pretraining, adapter training with the three-term loss,
//! primitive concept shift and the optimizer.

mod config;
mod loss;
mod optim;
mod run;
mod shift;

pub use config::TrainConfig;
pub use loss::{caila_loss, LossConfig, LossTerms, VisionBatch};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use run::{
    frozen_hash, metrics_csv, stage0_pretrain, train, EpochMetrics, Stage0Report, TrainOutcome,
};
pub use shift::{composition_rows, concept_shift, ShiftPlan, ShiftedFeature, MAX_DONOR_RETRIES};
