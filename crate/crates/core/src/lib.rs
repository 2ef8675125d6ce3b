//! Cognitive agents whose problem-solving knowledge lives in an explicit,
//! inspectable store of declarative memories (DMs) rather than in model
//! weights.
//!
//! * [`embedder`]: text embeddings and cosine similarity.
//! * [`kb`]: the append-only knowledge base and retrieval.
//! * [`backend`]: the narrow model interface (action logprobs, content,
//!   option logprobs) with scripted, recording and replay implementations.
//! * [`agent`]: the goal-stack / working-memory agent loop.
//! * [`teacher`]: compilation of knowledge from failed attempts.
//! * [`eval`]: retrieval oracle, ablation, fan-effect probe, statistics.
//! * [`store`]: JSONL persistence.

pub mod agent;
pub mod backend;
pub mod config;
pub mod embedder;
pub mod eval;
pub mod fixtures;
pub mod kb;
pub mod store;
pub mod teacher;
