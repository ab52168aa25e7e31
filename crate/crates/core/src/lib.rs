//! Agent-driven code generation and self-repair for low-resource target
//! languages.
//!
//! The pipeline retrieves concepts from a documentation-derived graph, plans
//! with confidence scores, generates code, and repairs it against compiler
//! and test feedback, falling back across ranked plans and writing fully
//! verified solutions into an episodic memory pool. Alongside the pipeline
//! live the token-level loss and dataset utilities for the self-refinement
//! training recipe, and the one-time vs. self-refine evaluation protocol.
//!
//! - [`task`]: task/candidate/feedback data model and corpus I/O
//! - [`kg`]: concept graph ingestion and ranked natural-language query
//! - [`memory`]: episodic pool of solved tasks with similarity matching
//! - [`backend`]: completion backends (scripted, HTTP) behind one trait
//! - [`agents`]: prompt assembly and response parsing for the four agents
//! - [`harness`]: external toolchain runner producing structured feedback
//! - [`traversal`]: the plan-rank/code/debug control loop
//! - [`losses`]: masked token losses, input masking, dataset mixing
//! - [`eval`]: fault-corpus builder and evaluation protocol
//! - [`config`]: TOML configuration binding all of the above

pub mod agents;
pub mod backend;
pub mod config;
pub mod eval;
pub mod harness;
pub mod kg;
pub mod losses;
pub mod memory;
pub mod task;
pub mod text;
pub mod traversal;

pub use agents::{AgentContext, AggrContext, Plan, RetrievalBundle, Stage};
pub use backend::{CompletionBackend, CompletionRequest, CompletionResponse, GenerationParams};
pub use kg::{ConceptGraph, ConceptHit};
pub use memory::{MemoryPool, MemoryRecord};
pub use task::{CodeCandidate, ExecutionFeedback, TaskSpec};
pub use traversal::{PipelineResult, SolveStatus, TraversalConfig};
