//! Toy backbone, synthetic benchmark and the training machinery around them.

mod backbone;
mod checkpoint;
pub mod data;
mod flops;
mod optim;
mod sampler;
mod train;

pub use backbone::{BoundModel, EvalOutput, ModelConfig, Stage, ToyBackbone, TrainOutput};
pub use checkpoint::{load_checkpoint, restore_checkpoint, save_checkpoint};
pub use data::{synth_generate, Dataset, Split, SyntheticSpec};
pub use flops::{count_flops, tape_flops, FlopReport, Group, LayerFlops};
pub use optim::{lr_at, Adam};
pub use sampler::PkSampler;
pub use train::{class_labels, train, StepLog, TrainConfig, TrainSummary};
