//! Orchestration of multi-entity reinforcement learning: lock-step
//! environments, entity-to-policy routing, worker/env node runtimes with
//! policy-group gradient collectives, and round-based training schemes.

pub mod config;
pub mod envs;
pub mod interface;
pub mod learners;
pub mod metrics;
pub mod orchestrator;
pub mod plot;
pub mod routing;
pub mod run;
pub mod schemes;
pub mod seed;
