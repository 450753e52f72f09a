//! Event-driven orchestration of recurring Earth-Observation processing
//! pipelines: job definitions drive catalog discovery, constraint-based
//! input resolution, uniform asynchronous tool execution and automatic
//! product ingestion, all coupled through a topic-routing pub/sub broker.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability, from broker wildcards to the full two-stage pipeline.

pub mod broker;
pub mod client;
pub mod clock;
pub mod config;
pub mod cron;
pub mod engine;
pub mod events;
pub mod jobs;
pub mod listener;
pub mod model;
pub mod observer;
pub mod runner;
pub mod system;
pub mod wrapper;
