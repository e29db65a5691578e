//! Nested named entity recognition with triaffine span attention and scoring.

pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod pipeline;
pub mod span;
pub mod tensor;
pub mod triaffine;

pub use error::{Error, Result};
pub use span::{Segments, Span};
pub use tensor::Tensor;
