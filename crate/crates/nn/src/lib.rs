//! Small deterministic CPU building blocks for convolutional networks.
//!
//! Layers cache their inputs on `forward` and accumulate parameter
//! gradients on `backward`; networks are composed by hand so that skip
//! connections and multi-input heads stay explicit. Everything is generic
//! over [`Scalar`] (`f32` for training, `f64` for gradient checks).

pub mod block;
pub mod conv;
pub mod layer;
pub mod norm;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod simple;
pub mod state;
pub mod tensor;

pub use block::ConvBnAct;
pub use conv::Conv2d;
pub use layer::{Layer, Mode};
pub use norm::BatchNorm2d;
pub use optim::Adam;
pub use param::{join, Buffer, Module, Param};
pub use scalar::{gemm, Scalar};
pub use simple::{sigmoid, LeakyRelu, Linear, Sigmoid, Upsample2x};
pub use state::{export_state, import_state, NamedArray, StateError};
pub use tensor::Tensor;
