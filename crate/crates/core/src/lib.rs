//! Limited-angle CT reconstruction with a prior-conditioned, wavelet-enhanced
//! diffusion model and guided skip-step DDIM sampling.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod sampler;
pub mod tomo;
pub mod wavelet;

pub use error::{Error, Result};
