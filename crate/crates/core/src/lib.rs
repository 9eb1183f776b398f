pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod extract;
pub mod memory;
pub mod model;
pub mod rng;
pub mod span;
pub mod tensor;

pub use error::{Error, Result};
pub use span::Span;
