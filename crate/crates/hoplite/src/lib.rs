//! Desk-scale multi-hop question answering with conservation training.
//!
//! The pipeline has three stages:
//!
//! 1. train a single-hop reader (miniature transformer encoder, bi-attention,
//!    span/yes-no/supporting-evidence heads) on sub-questions,
//! 2. train a question-type classifier and an iterative paragraph retriever,
//! 3. freeze the encoder, expand it with a laterally connected column and
//!    per-reasoning-type soft prompts, and train on multi-hop questions.
//!
//! Freezing is enforced bit-exactly: every frozen array carries a checksum
//! recorded at freeze time, the optimizer never touches the frozen partition,
//! and [`conservation::verify_conservation`] re-hashes the store on demand.
//!
//! Everything runs on a synthetic entity-relation corpus ([`corpus`]) that
//! mirrors the distractor-style multi-hop setting: bridge and comparison
//! questions, two gold paragraphs among ten candidates, per-sentence
//! supporting labels, single-hop sub-questions, and adversarial variants that
//! bait reasoning shortcuts.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod config;
pub mod conservation;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod prompt;
pub mod qclassifier;
pub mod reader;
pub mod retriever;
pub mod scalar;
pub mod store;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
