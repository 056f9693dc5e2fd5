//! Mixture-of-experts spatio-temporal traffic forecasting on a small
//! reverse-mode autodiff tape.

pub mod ablation;
pub mod adjacency;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod expert;
pub mod gating;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{finite_difference_check, Tape, Var};
pub use tensor::Tensor;

pub type Model = model::MixtureModel<f64>;
pub type Adjacency = adjacency::AdjacencyMatrix<f64>;
