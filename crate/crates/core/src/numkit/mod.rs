//! Minimal differentiable tensor engine: dense tensors, a reverse-mode tape,
//! a handful of layers, Adam, and the parameter checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
mod params;
mod rng;
pub mod special;
mod tape;
mod tensor;

pub use adam::{collect_grads, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use rng::RngStream;
pub use special::gaussian_cdf;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
