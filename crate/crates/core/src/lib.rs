pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod freqkernels;
pub(crate) mod kernels;
pub mod losses_metrics;
pub mod model;
pub mod params;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use kernels::WindowGeom;
pub use model::{IfBlend, ModelConfig};
pub use tensor::{Float, Tensor};
