//! Sand-dust image restoration lab: physically modeled sand synthesis, a
//! toy-scale hybrid CNN/Transformer restorer with gate fusion, a dark-channel
//! baseline, quality metrics, and the training/verification harness around them.

#[macro_use]
mod macros;

pub mod autograd;
pub mod cli;
pub mod dcp;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::{ImageBuffer, Plane};
pub use model::{Branches, FusionKind, Model, ModelConfig};
pub use params::{Binder, ParamStore};
pub use tensor::{Scalar, Tensor};
