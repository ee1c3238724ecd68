//! Deterministic simulation and scheduling for multi-priority LLM serving.
//!
//! * [`gain`]: token deadlines, gain functions and aggregate metrics.
//! * [`latmodel`]: batch latency model, fitting and online correction.
//! * [`sched_local`]: engine-level batch formation (SlideBatching and baselines).
//! * [`sched_global`]: request routing across instances (GoRouting and baselines).
//! * [`simcore`]: the discrete-event simulator.
//! * [`workload`]: synthetic and trace-driven request generation.
//! * [`config`]: experiment configuration files.
//! * [`scenarios`]: frozen experiments with pass/fail predicates.

pub mod gain;
pub mod latmodel;
pub mod sched_local;
pub mod sched_global;
pub mod workload;
pub mod simcore;
pub mod config;
pub mod scenarios;
