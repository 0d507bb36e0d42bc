//! Training-free sequential recommendation: candidate retrieval from semantic
//! and collaborative item similarity, followed by optional LLM re-ranking.

pub mod artifact;
pub mod collab;
pub mod corpus;
pub mod embed;
pub mod eval;
pub mod experiment;
pub mod http;
pub mod matrix;
pub mod rank;
pub mod retrieval;
