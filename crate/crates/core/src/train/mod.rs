//! Two-stage training: language pretraining, then the multimodal loop over the frozen
//! text stack with the captioning, denoising and alignment losses.

mod loss;
mod plan;
mod teacher;
mod trainer;

pub use loss::{loss_align, loss_ar, loss_dm, LossBreakdown, LossWeights};
pub use plan::{Stage, TrainPlan};
pub use teacher::TeacherEncoder;
pub use trainer::{pretrain_text, prepare_sample, Trainer, TrainingSample};
