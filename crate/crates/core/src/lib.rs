//! A desk-scale compression laboratory for a small learned translation-quality
//! metric: quantization, pruning and black-box distillation, together with the
//! evaluation and efficiency measurements used to compare them.

pub mod bench;
pub mod container;
pub mod error;
pub mod eval;
pub mod minimetric;
pub mod prune;
pub mod quantize;
pub mod rng;
pub mod synthworld;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
