//! Volumetric segmentation engine built around a U-shaped 3D convolutional
//! network with valid convolutions and explicit backpropagation.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{DType, LabelVolume, Scalar, Shape, Volume};
