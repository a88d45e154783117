//! A small reverse-mode autograd engine over rank-4 tensors.
//!
//! Everything in the detector and classifier is an `N × C × H × W` array, so
//! the engine only knows that one layout. Operations are recorded on a
//! [`Graph`] tape as they execute; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that needs one.
//!
//! The engine is generic over [`Scalar`] so that training runs in `f32` while
//! finite-difference gradient checks run the same code in `f64`.

mod conv;
mod error;
mod graph;
mod optim;
mod scalar;
mod store;
mod tensor;

pub use conv::{conv2d_output_side, Conv2dSpec};
pub use error::{Error, Result};
pub use graph::{CustomOp, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use store::{ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
