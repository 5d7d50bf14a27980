//! Self-supervised time-series representation learning by predicting future
//! latents from history latents, plus the frozen-encoder ridge forecasting
//! protocol used to evaluate the representations.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! at the crate root fix it to `f64`, which is what the CLI and the
//! evaluation protocol use.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Result, SimtsError};
pub use model::{EncoderConfig, LossVariant};
pub use scalar::Scalar;
pub use train::TrainConfig;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type TimeSeries = data::TimeSeries<f64>;
pub type WindowSample = data::WindowSample<f64>;
pub type NormStats = data::NormStats<f64>;
pub type SimTs = model::SimTs<f64>;
pub type Trainer = train::Trainer<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type RidgeModel = eval::RidgeModel<f64>;
pub type Splits = eval::Splits<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type SimTs32 = model::SimTs<f32>;
