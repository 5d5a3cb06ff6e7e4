//! Transfer-learning load forecaster for EV charging stations.
//!
//! A Mixer fuses the input features, an Informer encoder/decoder with
//! ProbSparse attention models the sequence, and a KAN head maps each
//! decoded step to a load value. Models pre-train on data-rich source
//! stations and fine-tune on a target station's first weeks of data.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the precision.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod informer;
pub mod kan;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Model64 = model::MikModel<f64>;
pub type Model32 = model::MikModel<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
