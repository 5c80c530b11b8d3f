pub mod annotator;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod exec;
pub mod hypothesis;
pub mod infotheory;
pub mod journal;
pub mod llm;
pub mod memory;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod search;
pub mod synthetic;
pub mod toolsmith;

pub use error::{Error, Result};
