//! Optimizer, multi-task and single-task training loops, fine-tuning with
//! a frozen trunk, and checkpoints.

mod adam;
mod checkpoint;
mod history;
mod plan;
mod step;
mod trainer;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use history::{EpochRecord, LossHistory, TOTAL_ROW};
pub use plan::{StepMode, TrainMode, TrainPlan, Weighting};
pub use step::{joint_gradients, Objective, StepOutput, TaskBatch};
pub use trainer::{
    finetune, init_bundle, pretrain_mtl, train_cep, train_dsc, train_stl, CepOutcome, TaskData, Trainer,
};
