pub mod adaptive;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod params;
pub mod scheduler;
pub mod training;

pub use adaptive::{AdaptiveModel, Inference, PlanPolicy};
pub use error::{Error, Result};
pub use experiment::ExperimentConfig;
pub use params::{ModelParams, Params};
