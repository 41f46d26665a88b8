//! Video face parsing with a Shuffle Transformer backbone and a
//! feature-alignment decoder, on top of a small f64 autodiff engine.
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`backbone`]: shuffled window-attention stages producing a feature pyramid.
//! * [`decoder`]: pyramid pooling plus offset-warped aggregation into logits.
//! * [`metrics`]: region J, boundary F, temporal decay and mIoU.
//! * [`pipeline`]: dataset loading, training, test-time augmentation.
//! * [`gradcheck`]: finite-difference verification of all gradients.

pub mod backbone;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{FaceParser, ModelConfig};
pub use tensor::Tensor;
