pub mod attention;
pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod encoder;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod tensor;
pub mod world;

pub use scalar::Real;

/// Double-precision tensor, the default element type everywhere.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Model64 = pipeline::HeroModel<f64>;
pub type Episode64 = world::Episode<f64>;
