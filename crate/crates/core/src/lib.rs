//! Sentence-level text provenance.
//!
//! Trace each sentence of a target text back to the source sentences it
//! derives from, label every target/source relationship as quotation,
//! compression, inference or other, and score predictions against gold
//! annotations.
//!
//! * [`corpus`]: data model, JSONL I/O, segmentation, tokenization
//! * [`retrieval`]: BM25 / LCS / dense candidate recall with voting
//! * [`providers`]: chat and embedding clients, caching, mocks
//! * [`tracer`]: direct-prompting and retrieval-augmented tracing
//! * [`metrics`]: macro/micro Track and Relation scores, Fleiss' kappa
//! * [`cli`]: the `trove` command line

pub mod cli;
pub mod corpus;
pub mod metrics;
pub mod providers;
pub mod retrieval;
pub mod tracer;

pub use corpus::{Example, Language, ProvenanceLink, RelationType, SentenceRef};
pub use metrics::{MetricReport, MetricScores};
pub use retrieval::{CandidateSet, RetrievalConfig, RetrieverKind};
pub use tracer::{Method, PreLabel, TraceConfig};
