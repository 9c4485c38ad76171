//! Teacher-to-student distillation: loss terms and training loops.

pub mod losses;
pub mod train;

pub use losses::{
    align_slots, joint_loss, joint_loss_var, kl_alignment_loss, kl_gradient_weight,
    spatial_contrastive_loss, temporal_contrastive_loss, LossTerms, Reduction,
};
pub use train::{
    distill_objective, distill_train, rng_stream, train_student, train_teacher, train_teacher_from,
    DistillConfig, DistillOutcome, EpochRecord, TrainConfig, TrainLog,
};
