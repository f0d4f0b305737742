//! Cross-domain knowledge distillation for small transformer text classifiers.
//!
//! The pipeline has two stages. A *meta-teacher* is trained jointly on every
//! domain with prototype-weighted classification and a domain-corruption
//! auxiliary loss, so that it digests knowledge that transfers across domains.
//! Per-domain *students* are then distilled from it with a five-term objective
//! (input embeddings, mapped hidden states, attention score matrices, softened
//! predictions, and the transferable-knowledge vector), where each sample is
//! weighted by how much domain expertise the teacher has on it.
//!
//! Crate layout follows the pipeline:
//!
//! - [`tensor`] — dense tensors, reverse-mode autodiff, Adam
//! - [`encoder`] — a small BERT-style encoder exposing every internal
//!   quantity the distillation losses consume
//! - [`data`] — multi-domain corpora, synthetic task generator, batching
//! - [`teacher`] — prototype tables and the meta-teacher training loop
//! - [`distill`] — layer-mapped distillation and its baselines
//! - [`harness`] — experiment protocols, records, and reports

pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod harness;
pub mod teacher;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
