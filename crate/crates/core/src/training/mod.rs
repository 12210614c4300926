//! Objectives, optimizer and the epoch loop.

mod adadelta;
mod check;
mod loss;
mod trainer;

pub use adadelta::{collect_grads, dropout_mask, AdaDelta, DEFAULT_CLIP, DEFAULT_EPS, DEFAULT_RHO};
pub use check::{check_model_gradients, check_objectives, gradcheck_fixture, gradcheck_setup, GRADCHECK_ROWS, GRADCHECK_SEED, TensorCheck, GRADCHECK_STEP, GRADCHECK_TOL};
pub use loss::{
    build_loss, evaluate_loss, loss_l1, loss_l2, loss_l3, loss_translation, DropoutFn,
    LossBreakdown, LossGraph, Objective,
};
pub use trainer::{
    corpus_loss, epoch_checkpoint, initial_model, train, EpochLog, TrainConfig, TrainOutcome,
    FINAL_CHECKPOINT, LOSS_LOG,
};
