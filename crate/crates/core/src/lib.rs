//! Core library for the hdldbg repair pipeline.
//!
//! The pipeline runs in four layers:
//!
//! * [`minihdl`]: a small deterministic HDL, its checker, and the mutation
//!   engine that turns correct designs into `(buggy, message, correct)` triples.
//! * [`knowledge`] and [`vectorize`]/[`retrieval`]: the error database lookup
//!   and the hybrid keyword/semantic two-stage ranker that assemble retrieval
//!   context for a query.
//! * [`llm`] and [`thoughtforge`]: chat-completion transport (live or replay),
//!   prompt assembly, self-guided thought selection and fine-tuning export.
//! * [`evalkit`]: pass-rate, pass@k, edit distance and ranking metrics.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below pin the
//! concrete types used by the persisted index (`f32`) and by tests that need
//! double precision (`f64`).

pub mod evalkit;
pub mod knowledge;
pub mod llm;
pub mod minihdl;
pub mod retrieval;
pub mod scalar;
pub mod thoughtforge;
pub mod vectorize;

pub use scalar::Scalar;

/// Keyword vector as stored in the on-disk index.
pub type SparseVector = vectorize::SparseVec<f32>;
/// Semantic vector as stored in the on-disk index.
pub type DenseVector = vectorize::DenseVec<f32>;
pub type HybridVector = vectorize::HybridVec<f32>;
pub type VectorIndex = vectorize::VectorIndex<f32>;
pub type CodeIndex = vectorize::CodeIndex<f32>;

pub type SparseVector64 = vectorize::SparseVec<f64>;
pub type DenseVector64 = vectorize::DenseVec<f64>;
pub type HybridVector64 = vectorize::HybridVec<f64>;
pub type VectorIndex64 = vectorize::VectorIndex<f64>;

/// Search parameters with the defaults used by the CLI.
pub type SelectionParams = retrieval::SelectionParams<f32>;
pub type RagBundle = retrieval::RagBundle<f32>;
