//! Core engine for a self-hosted scholarly literature search service.
//!
//! The crate combines a neural half (text embeddings and a language-model
//! chain) with a symbolic half (metadata predicates over document payloads):
//!
//! - [`corpus`]: document model, curation and the append-only document log.
//! - [`embedding`]: unit-norm text embeddings behind a provider trait.
//! - [`vectorstore`]: exact cosine search with filter expressions and pagination.
//! - [`ragchain`]: prompt templates, model providers, output parsing,
//!   token budgeting and the cell-granular generation cache.
//! - [`pipeline`]: question → retrieval → extraction table → cited answer,
//!   with a reproducibility record for every generation.
//! - [`bibliography`]: saved-reference collections with CSL-JSON and BibTeX export.
//! - [`feedback`]: question ratings and UMUX-Lite scoring.

pub mod bibliography;
pub mod corpus;
pub mod embedding;
pub mod feedback;
pub mod hash;
pub mod pipeline;
pub mod ragchain;
pub mod vectorstore;

pub use corpus::{CorpusStore, CurationPolicy, Document, IngestReport, RawRecord};
pub use embedding::{Embedder, EmbedderConfig, EmbeddingVector};
pub use pipeline::{Engine, ExtractionColumn, SearchRequest, SearchResponse};
pub use ragchain::{GenerationParams, ModelProvider, PromptTemplate, StubModel};
pub use vectorstore::{FilterExpr, Page, SearchHit, VectorIndex};
