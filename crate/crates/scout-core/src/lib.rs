//! Core library for the founder-evaluation pipeline.
//!
//! The pipeline turns founder profiles into chain-of-thought reasoning logs,
//! distills those logs into `IF ... THEN likelihood_of_success = HIGH|LOW`
//! rules, compiles the rules into a two-part decision policy, refines the
//! policy with a reward-adjusted scoring signal, and produces ensemble-voted
//! HIGH/LOW predictions with explanations and a full metric report.
//!
//! Every stage talks to a chat-completion backend through
//! [`gateway::ChatBackend`], so the whole pipeline runs deterministically
//! against the scripted mock backend in tests and against any
//! OpenAI-compatible endpoint in production.

pub mod artifacts;
pub mod clock;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod gateway;
pub mod memory;
pub mod pipeline;
pub mod policy;
pub mod prediction;
pub mod reasoning;
pub mod rules;
pub mod scoring;

pub use config::RunConfig;
pub use dataset::{FounderId, FounderRecord, OutcomeLabel, ProfileSet, SplitSpec};
pub use evaluation::{ConfusionMatrix, Metrics};
pub use gateway::{ChatBackend, ChatRequest, ChatResponse, CostReport, TokenUsage};
pub use memory::{MemoryScope, MemoryState};
pub use policy::{DecisionPolicy, PerformanceSummary};
pub use prediction::{Candidate, FinalPrediction};
pub use reasoning::ReasoningLog;
pub use rules::{Rule, RuleOutcome};
pub use scoring::RlScore;
