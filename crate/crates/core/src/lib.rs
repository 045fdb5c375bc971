pub mod autodiff;
pub mod conditioner;
pub mod diffusion;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod spatial_decoder;
pub mod spatial_vae;
pub mod tensor;

pub use autodiff::{Grads, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use nn::ParamStore;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Reference precision used by the oracles and gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
