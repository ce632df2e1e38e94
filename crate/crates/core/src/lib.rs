//! Retrieval-augmented generation over a multi-corpus key/value memory,
//! built on a small reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that don't care.

pub mod autodiff;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod retriever;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ValueHead};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model64 = model::Model<f64>;
pub type Snapshot64 = memory::MemorySnapshot<f64>;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Model32 = model::Model<f32>;
pub type Snapshot32 = memory::MemorySnapshot<f32>;
