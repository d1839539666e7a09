//! Cross-lingual definition-to-word embeddings.
//!
//! A definition in one language is encoded into the word embedding space of
//! another, so that the encoded vector lands near the word it defines.

pub mod bilembed;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dicttrain;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
