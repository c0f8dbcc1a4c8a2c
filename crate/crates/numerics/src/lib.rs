//! CPU tensors, convolution and attention kernels, and a tape-based reverse-mode graph.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while gradient checks
//! reuse the identical code path in `f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use graph::{Gradients, Graph, Mode, Var};
pub use params::{GradStore, Init, ParamBuilder, ParamId, ParamKind, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;
