//! Performance-engineering toolkit for fine-grained MoE inference:
//! roofline cost models, routing and serving simulators, expert-skipping
//! schedules, expert-pruning strategies, parallelism communication
//! planning, and a numerically exact toy MoE executor.
//!
//! Everything here is analytical or desk-scale; no GPU execution is
//! involved. All types are immutable after construction and safe to share
//! across threads.

pub mod comm;
pub mod config;
pub mod error;
pub mod pruning;
pub mod roofline;
pub mod routing;
pub mod schedule;
pub mod serving;
pub mod toy;

pub use error::{Error, Result};
