//! Evidence retrieval for news verification.
//!
//! Given a news article, `evidex` queries a set of reliable sources for
//! candidate articles, then ranks them by word mover's distance over
//! pretrained word embeddings. Candidates closer than a threshold are
//! reported as supporting evidence; if none are, the article is flagged as
//! potentially fake.

pub mod embeddings;
pub mod extract;
pub mod textproc;
pub mod transport;
pub mod config;
pub mod sourceclient;
pub mod pipeline;
