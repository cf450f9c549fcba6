//! Multilingual sentence-embedding distillation.
//!
//! A frozen *teacher* encoder embeds source-language sentences; a *student*
//! encoder is trained so that both a source sentence and its translation land
//! on the teacher's vector. The crate also carries the evaluation side: STS
//! rank correlation, a joint-pool language-bias metric, margin-scored bitext
//! mining, bidirectional retrieval accuracy and a two-component PCA
//! projection for inspecting how languages mix in the embedding space.
//!
//! Module map:
//!
//! * [`corpus`] parallel TSV loading, hashed n-gram tokenizer, balanced
//!   multi-dataset batching.
//! * [`encoder`] embedding-bag + mean-pool + affine head, binary params and
//!   embedding files, teacher providers.
//! * [`distill`] the distillation loss, analytic gradients, Adam, the
//!   warmup/decay schedule and the training loop.
//! * [`eval_sts`] cosine, Spearman, STS evaluation, language-bias report and
//!   permutation test.
//! * [`mining`] exact k-NN, ratio-margin scoring, candidate mining, F1
//!   threshold sweep, Tatoeba accuracy.
//! * [`analysis`] power-iteration PCA and projection TSV output.
//! * [`commands`] the run configuration, manifests and the subcommand
//!   implementations behind the `xdistill` binary.
//! * [`synthetic`] seeded toy corpora (word-substitution cipher) used by the
//!   examples and tests.

pub mod analysis;
pub mod commands;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval_sts;
pub mod mining;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
