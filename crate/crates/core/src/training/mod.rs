//! Loss, metric, optimizer, augmentation and the training loop.

mod adam;
mod augment;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use augment::{augment, AugmentConfig, Transform};
pub use loss::{dice_score, soft_dice_loss, DICE_THRESHOLD};
pub use trainer::{evaluate, train, train_with, EpochRecord, Evaluation, TrainConfig, TrainHistory, TrainOutcome};
