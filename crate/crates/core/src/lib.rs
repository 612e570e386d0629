//! Selection-bias measurement and mitigation for multiple-choice question
//! answering with a small decoder-only transformer.

pub mod data;
pub mod debias;
pub mod engine;
mod error;
pub mod metrics;
pub mod model;
pub mod par;
pub mod permute;
pub mod tensor;

pub use error::{Error, Result};
