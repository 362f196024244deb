//! Category-aware contrastive vision-language alignment over precomputed
//! feature vectors.
//!
//! The crate covers the pretraining objective and its hand-derived
//! gradients ([`contrastive`]), the training loop ([`trainer`]), prompt
//! banks ([`prompt_bank`]), zero-shot prompt-ensemble classification
//! ([`zeroshot`]), few-shot adapters ([`adapters`]), the evaluation
//! protocol ([`evalkit`]) and the file formats ([`io`]).

pub mod adapters;
pub mod contrastive;
pub mod embedding;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod prompt_bank;
pub mod trainer;
pub mod zeroshot;

pub use embedding::{JointEmbedding, ModelState, ProjectionHead};
pub use error::{Error, Position, Result};
pub use io::{SurrogateFeaturizer, TextFeaturizer, TripletRecord};
pub use prompt_bank::{Category, CategoryRegistry, PromptBank};
