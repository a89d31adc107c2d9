//! Minimal CPU neural-network toolkit: NCHW tensors, a reverse-mode tape,
//! and the Adam optimiser.

mod adam;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use kernels::ConvSpec;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
