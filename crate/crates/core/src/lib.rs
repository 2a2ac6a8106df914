//! Passage retrieval engine combining a trainable dense dual encoder with a
//! BM25 sparse index.
//!
//! The pipeline mirrors the classic open-domain QA retrieval stack:
//!
//! 1. [`corpus`] splits documents into fixed-width passages and handles the
//!    text formats (passage TSV, question/answer JSONL).
//! 2. [`sparse`] builds an inverted index scored with Lucene-style BM25.
//! 3. [`encoder`] holds the dual bag-of-embeddings encoders and produces
//!    passage/question vectors.
//! 4. [`trainer`] fits the encoders with an in-batch-negative NLL (or
//!    triplet) objective using analytic gradients and Adam.
//! 5. [`miner`] supplies hard negatives: random, BM25, gold-in-batch, or
//!    asynchronously refreshed ANCE negatives.
//! 6. [`dense_index`] stores embeddings and answers maximum-inner-product
//!    queries exactly (flat scan) or approximately (HNSW).
//! 7. [`ranker`] runs dense retrieval and sparse/dense hybrid reranking.
//! 8. [`reader`] scores answer spans inside retrieved passages.
//! 9. [`eval`] computes top-k retrieval accuracy and exact-match reports.
//!
//! All numeric kernels are generic over the floating-point type through the
//! [`Scalar`] trait; the concrete aliases below pin the default precision
//! used by the command-line pipeline. On-disk formats always store `f32`
//! regardless of the in-memory scalar.

pub mod binio;
pub mod config;
pub mod corpus;
pub mod dense_index;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mat;
pub mod miner;
pub mod ranker;
pub mod reader;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// Floating-point scalar the numeric kernels are generic over.
///
/// `f32` keeps memory small for large corpora; `f64` is what the pipeline
/// defaults to so that scores and losses are stable to well below the test
/// tolerances.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossy conversion from `f64` literals (tunables,
    /// constants). Never fails for finite inputs on `f32`/`f64`.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Default scalar for the command-line pipeline.
pub type Real = f64;

/// Dual encoder at the default precision.
pub type DualEncoder = encoder::DualEncoder<Real>;

/// Embedding store at the default precision.
pub type EmbeddingStore = dense_index::EmbeddingStore<Real>;

/// HNSW index at the default precision.
pub type HnswIndex = dense_index::HnswIndex<Real>;

//204e4: ReaderHead alias restored once reader lands
