//! Corpus ingestion, tokenization, MLM masking, grouped splits and the
//! synthetic corpus generator.

mod corpus;
mod mlm;
mod split;
pub mod synth;
mod vocab;

pub use corpus::{
    read_jsonl, validate_corpus, write_jsonl, write_rows, Gender, Location, Post, Task,
};
pub use mlm::{mask_for_mlm, MlmExample, DEFAULT_MASK_RATE};
pub use split::{
    make_splits, write_splits, Holdout, SplitManifest, SplitMode, SplitName, SplitSpec, Splits,
};
pub use vocab::{tokenize, TokenSequence, Vocab, CLS, MASK, PAD, RESERVED, UNK};
