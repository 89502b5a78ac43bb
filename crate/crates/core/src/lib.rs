pub mod body;
pub mod datagen;
pub mod dualflow;
pub mod error;
pub mod geom;
pub mod imageio;
pub mod latentcodec;
pub mod motioncodec;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod tensorad;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensorad::Tensor<f32>;
pub type Tensor64 = tensorad::Tensor<f64>;
pub type DualModel32 = dualflow::DualModel<f32>;
pub type DualModel64 = dualflow::DualModel<f64>;
pub type Trainer32 = pipeline::Trainer<f32>;
pub type Trainer64 = pipeline::Trainer<f64>;
