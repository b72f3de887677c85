//! Local routing consistency analytics for Mixture-of-Experts routing traces.
//!
//! The crate ingests per-token expert-activation traces and computes segment
//! routing best performance (SRP), segment cache best hit rate (SCH), load
//! balance and expert specialization statistics, together with brute-force
//! reference implementations used to check them.

pub mod cache;
pub mod oracle;
pub mod report;
pub mod specialization;
pub mod srp;
pub mod synth;
pub mod trace;

pub use trace::{ExpertKey, LayerRouting, LayerSpec, RoutingTrace, Sequence, TraceError, TraceHeader};
