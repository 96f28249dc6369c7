//! mdcn: a two-stream multi-dimensional convolutional network for violence
//! detection in video, built from scratch: dense 5-D tensor kernels, the
//! MDC-block model with complexity audits, Horn-Schunck optical flow, a clip
//! container and synthetic-data pipeline, and an SGD trainer.

pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
