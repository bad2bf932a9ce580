//! Low-rank convolutional adapters (ConvLoRA) and adaptive batch
//! normalization (AdaBN) for parameter-efficient multi-target unsupervised
//! domain adaptation of a small 2D U-Net segmentation model.

pub mod adabn;
pub mod data;
pub mod convlora;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Scalar, Tensor};
