pub mod config;
pub mod error;
pub mod eval;
#[cfg(test)]
mod fixtures;
pub mod infer;
pub mod jsonl;
pub mod layout;
pub mod model;
pub mod run;
pub mod tensor;
pub mod train;
pub mod vq;
pub mod world;

pub use error::{Error, Result};
