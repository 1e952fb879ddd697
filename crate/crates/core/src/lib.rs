//! Trace-driven detection of object replicas: distinct heap objects allocated at
//! the same calling context whose contents turn out to be identical.
//!
//! The pipeline replays an event trace (allocations, frees, loads and stores)
//! through a simulated PMU load sampler and a small bank of simulated hardware
//! watchpoints. Samples taken from one object arm watchpoints on the next
//! sampled object of the same allocation context; traps turn into
//! equivalent/different comparisons, which become a per-context replication
//! factor with lower and upper bounds on the largest identical-group ratio.
//!
//! An exhaustive oracle and a synthetic workload generator provide ground
//! truth for the sampled estimates.

pub mod bounds;
pub mod cct;
pub mod detector;
pub mod ids;
pub mod index;
pub mod oracle;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod sampling;
pub mod trace;
pub mod watchpoint;
pub mod workload;

pub use ids::{CtxId, FrameId, ObjId, Tid};
