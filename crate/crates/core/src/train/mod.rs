//! Training objectives, optimizer and the two-stage curriculum.

pub mod curriculum;
pub mod losses;
pub mod negatives;
pub mod optim;

pub use curriculum::{
    jsonl_sink, run_curriculum, stage2_init, tau_at, train_stage, Curriculum, LossRecord, NegativePolicy,
    Stage, StageCheckpoint, StageData, TrainConfig, Trainer,
};
pub use losses::{
    forward_mlm, loss_evaluation, loss_generation, loss_generation_with_noise, loss_stage1,
    EvaluationLoss, GenerationLoss,
};
pub use negatives::{sample_negative, NegativePool};
pub use optim::{Adam, LrSchedule};

#[cfg(test)]
mod tests;
