//! Co-attention multiple-choice reasoning over object features and text.
//!
//! The model embeds a query, four candidate responses and a set of object
//! feature vectors, fuses text with objects, encodes each query/response pair
//! with stacked self- and guided-attention blocks backed by a FIFO memory, and
//! scores the candidates. Everything runs on a small reverse-mode autodiff
//! tape generic over `f32`/`f64`.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod head;
pub mod numerics;
pub mod pipeline;
pub mod taskdata;

mod fsutil;

pub use error::{Error, Result};
pub use numerics::{Mode, Scalar};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamSet32 = numerics::ParamSet<f32>;
pub type ParamSet64 = numerics::ParamSet<f64>;
pub type Model32 = pipeline::Model<f32>;
pub type Model64 = pipeline::Model<f64>;
pub type MemoryCell32 = encoder::MemoryCell<f32>;
pub type MemoryCell64 = encoder::MemoryCell<f64>;
