//! Desk-scale laboratory for cross-lingual abstractive summarization.
//!
//! The crate bundles everything needed to train and dissect a miniature
//! encoder-decoder Transformer on a synthetic two-language corpus:
//!
//! - [`tensor`]: reverse-mode autodiff over flat `f64` tensors,
//! - [`optim`]: Adam with an inverse-square-root warmup schedule,
//! - [`model`]: the Transformer itself with attention-weight capture,
//! - [`corpus`]: synthetic corpus generation with a known token bijection,
//! - [`train`]: the NCLS / NCLS+MS / MCLAS objectives and the
//!   pretrain-then-finetune scheme,
//! - [`decode`]: language-constrained beam search with trigram blocking,
//! - [`eval`]: ROUGE, length statistics, best-worst scaling, Fleiss' kappa,
//! - [`probe`]: attention-head classification and heatmap emission,
//! - [`harness`]: run configuration and end-to-end pipeline orchestration
//!   shared by the CLI and the acceptance suite.

pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod harness;
pub mod model;
pub mod optim;
pub mod probe;
pub mod tensor;
pub mod train;
