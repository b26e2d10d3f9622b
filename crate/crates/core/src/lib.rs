//! Few-shot text classification with cloze prompts and trainable
//! demonstration embeddings.
//!
//! The pipeline: a [`template::TemplateSpec`] turns a labeled example into a
//! token sequence with a `[MASK]` slot; a small bidirectional encoder scores
//! label words at the mask; per-class virtual demonstration blocks appended
//! to the sequence are trained with a contrastive objective against views
//! where one block is a real demonstration. At inference the virtual blocks
//! are dropped entirely.

pub mod bank;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod task;
pub mod template;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
