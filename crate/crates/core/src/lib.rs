//! Statutory article retrieval.
//!
//! A two-stage retriever: a contrastively trained dense bi-encoder (with a
//! hierarchical article encoder and BM25 hard negatives), followed by an
//! edge-typed graph attention network over a query-article bipartite graph
//! joined with the statute hierarchy. Relevance scores from the graph are
//! distilled into the query encoder so that unseen queries can be served
//! against graph-enriched article embeddings.

pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod eval;
pub mod par;
pub mod sparse;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
