//! AdamW, cosine warm restarts, HSCK checkpoints and the stage-1 /
//! stage-2 training loops.

pub mod checkpoint;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_model, Checkpoint};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::CosineWarmRestarts;
pub use trainer::{train_cascade, train_stage, PatchSampler, TrainConfig, TrainOutputs, TrainReport};
