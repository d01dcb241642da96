//! Serialized multitask language modeling for spoken dialogue.
//!
//! A small decoder-only transformer reads a dialogue history made of word
//! tokens, inline sentiment markers and pooled speech-feature vectors, then
//! emits the current-turn sentiment, the response sentiment and the response
//! text as one target sequence. Everything needed to train it, decode it,
//! score it and compare it against classification baselines on a synthetic
//! corpus lives here.

pub mod baselines;
pub mod corpus;
pub mod experiments;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod speech;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{Corpus, Dialogue, GeneratorSpec, SentimentLabel, Split, Turn};
pub use model::{ModelConfig, ModelParameters};
pub use prompt::{AssemblyConfig, PromptElement, SerializedExample, TaskOrdering};
pub use tokenizer::Vocabulary;
