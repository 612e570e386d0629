//! Tokenization, dataset ingestion and prompt rendering.

mod dataset;
mod synth;
mod template;
mod tokenizer;

pub use dataset::{load_dataset, parse_dataset, to_jsonl, McqInstance};
pub use synth::{synthetic_dataset, SyntheticSpec};
pub use template::{PromptTemplate, RenderedPrompt};
pub use tokenizer::{Tokenizer, BYTE_TOKENS};
