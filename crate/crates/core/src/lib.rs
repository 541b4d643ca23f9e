pub mod augment;
pub mod channel;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod jscc;
pub mod neural;
pub mod unified_space;

pub use error::{Error, Result};
