pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;
pub mod summary;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{ReconMode, RunConfig, TrainMode};
pub use error::{Error, Result};
pub use model::Model;
