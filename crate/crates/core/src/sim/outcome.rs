//! Per-request records, aggregate counters, and the event log.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Why a request was dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    NoReadyReplica,
    QueueFull,
    KvFull,
    Terminated,
}

impl fmt::Display for DropCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropCause::NoReadyReplica => "no_ready_replica",
            DropCause::QueueFull => "queue_full",
            DropCause::KvFull => "kv_full",
            DropCause::Terminated => "terminated",
        };
        write!(f, "{s}")
    }
}

/// Lifecycle record of one request, filled in as the simulation advances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_time: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub replica_id: Option<String>,
    pub admitted_at: Option<f64>,
    pub first_token_at: Option<f64>,
    pub completed_at: Option<f64>,
    pub dropped: Option<DropCause>,
}

impl RequestRecord {
    /// Time to first token, inclusive of queueing delay.
    pub fn ttft(&self) -> Option<f64> {
        self.first_token_at.map(|t| t - self.arrival_time)
    }

    /// Mean inter-token latency over the decode phase.
    pub fn itl_mean(&self) -> Option<f64> {
        match (self.first_token_at, self.completed_at) {
            (Some(first), Some(done)) if self.output_tokens > 1 => {
                Some((done - first) / (self.output_tokens - 1) as f64)
            }
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        }
    }
}

/// Aggregate outcome of a simulation run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SimOutcome {
    pub records: Vec<RequestRecord>,
    pub arrived: u64,
    pub completed: u64,
    pub dropped: u64,
    pub drop_causes: BTreeMap<String, u64>,
    /// Requests sitting in replica queues when the run ended.
    pub queued_at_end: u64,
    /// Requests still being served when the run ended.
    pub in_flight_at_end: u64,
}

impl SimOutcome {
    /// Flow conservation: every arrival is accounted for exactly once.
    pub fn flow_conserved(&self) -> bool {
        self.arrived == self.completed + self.dropped + self.in_flight_at_end + self.queued_at_end
    }
}

/// Append-only event log for golden-file regression and determinism checks.
#[derive(Debug, Default)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    pub fn push(&mut self, line: String) {
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        for line in &self.lines {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex_string(&h.finalize())
    }

    pub fn write_to(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.lines.join("\n") + "\n")
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
