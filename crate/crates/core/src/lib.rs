//! Deterministic closed-loop simulator of heterogeneous LLM inference
//! serving with a saturation-aware autoscaling control plane and an HPA
//! baseline.

pub mod control;
pub mod domain;
pub mod harness;
pub mod metrics_io;
pub mod optimizer;
pub mod saturation;
pub mod sim;
pub mod workload;
