//! Lifelong free-text knowledge editing on a desk-scale decoder-only language model.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//!
//! - [`autodiff`]: a dynamic reverse-mode tape over dense `f64` tensors.
//! - [`model`]: a small LLaMA-style decoder whose per-layer matrices are addressed by
//!   [`model::ComponentId`].
//! - [`tokenizer`]: byte-level and byte-pair tokenizers.
//! - [`perturbation`]: bounded uniform noise on token embeddings during edit-time training.
//! - [`fusion`]: Taylor importance per component, top-k selection and three-way convex merging.
//! - [`engine`]: the sequential editing driver plus the optimizers and base-model pretraining.
//! - [`eval`]: BLEU, per-token perplexity and multi-rank efficacy/specificity reports.
//! - [`corpus`]: edit instances, ranked queries and a deterministic synthetic corpus.
//!
//! File formats, configuration and the command line live in the companion `evoedit` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod engine;
mod error;
pub mod eval;
pub mod fusion;
pub(crate) mod math;
pub mod model;
pub mod perturbation;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Tensor;
