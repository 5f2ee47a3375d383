//! Bidirectional masked-token transformer over a patch vector-quantized image
//! tokenizer, with token-resampling samplers for denoising, inpainting and
//! composition, and the metrics used to evaluate them.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod image;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
