pub mod control;
pub mod env;
mod error;
pub mod occupancy;
pub mod oracle;
pub mod registry;
pub mod rng;
pub mod tokenizer;
pub mod valuation;

pub use error::{Result, VocError};
