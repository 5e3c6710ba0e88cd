//! Vision transformer with attention-guided token reduction, a cross-layer
//! cache, and a cross-layer aggregation classification head.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
