//! Multi-encoder parody classification.
//!
//! Three small transformer encoders (parody, humor, sarcasm) each produce a
//! `[CLS]` representation; the representations are fused by concatenation,
//! multi-head self-attention or max-pooling and scored by a sigmoid head.
//! The humor and sarcasm encoders are specialised beforehand by
//! domain-adaptive MLM pretraining followed by auxiliary classification,
//! and the whole stack is then fine-tuned jointly on parody labels.
//!
//! Everything runs in `f64` on a small reverse-mode autodiff tape
//! ([`tensorcore`]), so every gradient can be checked against finite
//! differences.

pub mod attention;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod head;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod tensorcore;

pub use error::{Error, Result};
