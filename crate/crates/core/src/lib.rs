//! Tool reliability evaluation and agent orchestration for tool-integrated LLM systems.

pub mod agents;
pub mod community;
pub mod llm;
pub mod reliability;
pub mod runtime;
pub mod schema;
pub mod seed;
pub mod service;
pub mod store;
pub mod stub;
pub mod templates;
pub mod trace;
pub mod verification;
pub mod workspace;
