//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Just enough machinery to train small convolutional/recurrent video
//! models on a CPU: a tape ([`Graph`]), parameter storage, Adam, and
//! im2col-based (transposed) convolutions. Generic over `f32`/`f64` so that
//! finite-difference checks can run in double precision.

pub mod conv;
pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::{Float, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("backward called on an inference graph")]
    NoGrad,
}

pub type Result<T> = std::result::Result<T, Error>;
