//! Online knowledge distillation between peer networks trained on locally
//! mixed images and globally mixed hidden representations.

pub mod backbone;
pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod mixing;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use backbone::{Architecture, ForwardRecord, MixingPointRegistry, Mode, Network};
pub use checkpoint::Checkpoint;
pub use cohort::{Cohort, MixingFlags, StepDraws, StepStreams};
pub use config::ExperimentConfig;
pub use data::{Dataset, DatasetSource};
pub use error::{Error, Result};
pub use evaluation::{Evaluation, RunReport};
pub use losses::{KdHyperparams, LossBreakdown};
pub use mixing::MixMask;
pub use optim::Sgd;
pub use sampling::{Quadruple, RandomStream};
pub use tensor::Tensor;
pub use training::{RunOptions, Schedule};
