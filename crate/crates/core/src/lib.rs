//! Membership inference against denoising diffusion models via step-wise
//! reconstruction error.
//!
//! The crate is generic over the scalar type (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the command-line tool uses.

pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod secmi;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type NoiseSchedule = schedule::NoiseSchedule<f64>;
pub type EpsilonModel = model::EpsilonModel<f64>;
pub type Checkpoint = trainer::Checkpoint<f64>;
pub type Dataset = data::Dataset<f64>;
pub type LabeledSample = data::LabeledSample<f64>;
pub type AttackReport = metrics::AttackReport<f64>;
pub type ScoredSample = metrics::ScoredSample<f64>;
pub type TErrorTable = secmi::TErrorTable<f64>;
pub type SyntheticSet = baselines::SyntheticSet<f64>;

pub type NoiseScheduleF32 = schedule::NoiseSchedule<f32>;
pub type EpsilonModelF32 = model::EpsilonModel<f32>;
pub type DatasetF32 = data::Dataset<f32>;
