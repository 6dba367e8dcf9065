//! Discrete-event simulation of the serving cluster: replicas, KV-token
//! accounting, request lifecycle, provisioning and draining.
//!
//! The engine is single-threaded and advances monotonically in simulated
//! time. The control plane interacts with it only at tick boundaries
//! through [`Simulator::snapshot_metrics`] and
//! [`Simulator::apply_replica_target`].
//!
//! KV accounting reserves a request's full footprint (input + output
//! tokens) at admission and releases it atomically at completion, so
//! `occupied_tokens` can never overshoot capacity mid-decode.

pub mod outcome;
pub mod scheduler;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use crate::domain::{MetricSnapshot, RequestSpec, ScenarioConfig, VariantSpec};
pub use outcome::{DropCause, EventLog, RequestRecord, SimOutcome};
use scheduler::{schedule_request, ReplicaView, ScorerWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicaPhase {
    Provisioning,
    Ready,
    Draining,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestStage {
    Prefill,
    Decode,
}

/// One request currently admitted on a replica.
#[derive(Debug, Clone)]
pub struct ActiveRequest {
    pub request_id: u64,
    pub stage: RequestStage,
    /// Full KV footprint held from admission to completion.
    pub tokens_reserved: u64,
    pub started_at: f64,
    pub first_token_at: Option<f64>,
}

/// One live inference server replica.
#[derive(Debug)]
pub struct ReplicaState {
    pub replica_id: String,
    pub variant_id: String,
    pub phase: ReplicaPhase,
    pub ready_at: f64,
    pub occupied_tokens: u64,
    pub queue: VecDeque<u64>,
    pub in_flight: BTreeMap<u64, ActiveRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Completion { replica: String, request: u64 },
    PrefillDone { replica: String, request: u64 },
    ReplicaReady { replica: String },
    DrainDeadline { replica: String },
    Arrival { request: u64 },
}

impl EventKind {
    // Completions free capacity before same-instant arrivals are routed.
    fn priority(&self) -> u8 {
        match self {
            EventKind::Completion { .. } => 0,
            EventKind::PrefillDone { .. } => 1,
            EventKind::ReplicaReady { .. } => 2,
            EventKind::DrainDeadline { .. } => 3,
            EventKind::Arrival { .. } => 4,
        }
    }
}

#[derive(Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // BinaryHeap is a max-heap; invert so the earliest event pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.priority().cmp(&self.kind.priority()))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Replica counts per lifecycle phase for one variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicaCounts {
    pub provisioning: u32,
    pub ready: u32,
    pub draining: u32,
}

impl ReplicaCounts {
    /// Replicas that count toward the actuated target.
    pub fn active(&self) -> u32 {
        self.provisioning + self.ready
    }
}

/// A replica lifecycle transition reported by [`Simulator::apply_replica_target`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transition {
    Created { replica_id: String, ready_at_ms: u64 },
    Draining { replica_id: String },
    Terminated { replica_id: String, dropped: u64 },
}

#[derive(Debug, thiserror::Error)]
#[error("invalid target {desired} for {variant_id}: exceeds max_replicas {max}")]
pub struct InvalidTarget {
    pub variant_id: String,
    pub desired: u32,
    pub max: u32,
}

pub struct Simulator {
    now: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    replicas: BTreeMap<String, ReplicaState>,
    variants: BTreeMap<String, VariantSpec>,
    requests: HashMap<u64, RequestSpec>,
    records: BTreeMap<u64, RequestRecord>,
    weights: ScorerWeights,
    hard_queue_cap: u64,
    provisioning_delay: f64,
    drain_grace: f64,
    replica_seq: BTreeMap<String, u32>,
    last_prefix_replica: HashMap<String, String>,
    arrived: u64,
    completed: u64,
    dropped: u64,
    drop_causes: BTreeMap<String, u64>,
    log: EventLog,
}

impl Simulator {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            now: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            replicas: BTreeMap::new(),
            variants: cfg
                .variants
                .iter()
                .map(|v| (v.variant_id.clone(), v.clone()))
                .collect(),
            requests: HashMap::new(),
            records: BTreeMap::new(),
            weights: ScorerWeights::from_map(&cfg.scheduler_weights),
            hard_queue_cap: cfg.hard_queue_cap,
            provisioning_delay: cfg.provisioning_delay,
            drain_grace: cfg.drain_grace,
            replica_seq: BTreeMap::new(),
            last_prefix_replica: HashMap::new(),
            arrived: 0,
            completed: 0,
            dropped: 0,
            drop_causes: BTreeMap::new(),
            log: EventLog::default(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    /// Creates `n` replicas of a variant that are ready immediately,
    /// bypassing the provisioning delay. Only valid before the clock has
    /// advanced: it models a deployment already running at its floor when
    /// the experiment begins.
    pub fn prewarm(&mut self, variant_id: &str, n: u32) {
        assert_eq!(self.now, 0.0, "prewarm only valid at t=0");
        assert!(self.variants.contains_key(variant_id));
        for _ in 0..n {
            let seq = self.replica_seq.entry(variant_id.to_string()).or_insert(0);
            let replica_id = format!("{variant_id}-{:04}", *seq);
            *seq += 1;
            self.replicas.insert(
                replica_id.clone(),
                ReplicaState {
                    replica_id: replica_id.clone(),
                    variant_id: variant_id.to_string(),
                    phase: ReplicaPhase::Ready,
                    ready_at: 0.0,
                    occupied_tokens: 0,
                    queue: VecDeque::new(),
                    in_flight: BTreeMap::new(),
                },
            );
            self.log_line(0.0, "prewarm", &replica_id, "-", String::new());
        }
    }

    /// Total arrivals observed at the gateway so far.
    pub fn arrivals_seen(&self) -> u64 {
        self.arrived
    }

    pub fn event_log(&self) -> &EventLog {
        &self.log
    }

    pub fn replica(&self, id: &str) -> Option<&ReplicaState> {
        self.replicas.get(id)
    }

    pub fn inject_arrivals(&mut self, arrivals: &[RequestSpec]) {
        for r in arrivals {
            self.requests.insert(r.request_id, r.clone());
            let ev = Event {
                time: r.arrival_time,
                seq: self.next_seq(),
                kind: EventKind::Arrival {
                    request: r.request_id,
                },
            };
            self.events.push(ev);
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn push_event(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq();
        self.events.push(Event { time, seq, kind });
    }

    fn log_line(&mut self, time: f64, kind: &str, replica: &str, request: &str, payload: String) {
        self.log.push(format!(
            "t={time:.6} kind={kind} replica={replica} request={request} {payload}"
        ));
    }

    /// Processes all events up to and including `to_time`, then sets the
    /// clock to `to_time`.
    pub fn advance(&mut self, to_time: f64) {
        assert!(to_time >= self.now, "time must advance monotonically");
        while let Some(ev) = self.events.peek() {
            if ev.time > to_time {
                break;
            }
            let ev = self.events.pop().unwrap();
            self.now = ev.time;
            self.handle(ev);
        }
        self.now = to_time;
    }

    fn handle(&mut self, ev: Event) {
        match ev.kind {
            EventKind::Arrival { request } => self.on_arrival(request),
            EventKind::PrefillDone { replica, request } => self.on_prefill_done(&replica, request),
            EventKind::Completion { replica, request } => self.on_completion(&replica, request),
            EventKind::ReplicaReady { replica } => self.on_replica_ready(&replica),
            EventKind::DrainDeadline { replica } => self.on_drain_deadline(&replica),
        }
    }

    fn on_arrival(&mut self, request_id: u64) {
        let req = self.requests[&request_id].clone();
        self.arrived += 1;
        let mut record = RequestRecord {
            request_id,
            arrival_time: req.arrival_time,
            input_tokens: req.input_tokens,
            output_tokens: req.output_tokens,
            replica_id: None,
            admitted_at: None,
            first_token_at: None,
            completed_at: None,
            dropped: None,
        };

        let ready: Vec<ReplicaView> = self
            .replicas
            .values()
            .filter(|r| r.phase == ReplicaPhase::Ready)
            .map(|r| {
                let cap = self.variants[&r.variant_id].kv_capacity_tokens;
                ReplicaView {
                    replica_id: r.replica_id.clone(),
                    queue_depth: r.queue.len() as u64,
                    kv_usage: r.occupied_tokens as f64 / cap as f64,
                    free_tokens: cap - r.occupied_tokens,
                    affinity: req
                        .prefix_key
                        .as_ref()
                        .and_then(|k| self.last_prefix_replica.get(k))
                        .is_some_and(|id| *id == r.replica_id),
                }
            })
            .collect();

        match schedule_request(&req, &ready, self.weights, self.hard_queue_cap) {
            Ok(replica_id) => {
                if let Some(key) = &req.prefix_key {
                    self.last_prefix_replica
                        .insert(key.clone(), replica_id.clone());
                }
                record.replica_id = Some(replica_id.clone());
                self.records.insert(request_id, record);
                self.log_line(
                    self.now,
                    "route",
                    &replica_id,
                    &request_id.to_string(),
                    format!("input={} output={}", req.input_tokens, req.output_tokens),
                );
                self.replicas
                    .get_mut(&replica_id)
                    .unwrap()
                    .queue
                    .push_back(request_id);
                self.try_admit(&replica_id);
            }
            Err(cause) => {
                record.dropped = Some(cause);
                self.records.insert(request_id, record);
                self.record_drop(request_id, cause);
            }
        }
    }

    fn record_drop(&mut self, request_id: u64, cause: DropCause) {
        self.dropped += 1;
        *self.drop_causes.entry(cause.to_string()).or_insert(0) += 1;
        self.log_line(
            self.now,
            "drop",
            "-",
            &request_id.to_string(),
            format!("cause={cause}"),
        );
    }

    /// Moves queued requests into flight while a concurrency slot and the
    /// full KV footprint are available. FIFO: a blocked head blocks the queue.
    fn try_admit(&mut self, replica_id: &str) {
        loop {
            let replica = match self.replicas.get(replica_id) {
                Some(r) if r.phase != ReplicaPhase::Terminated => r,
                _ => return,
            };
            let variant = &self.variants[&replica.variant_id];
            let Some(&front) = replica.queue.front() else {
                return;
            };
            let req = &self.requests[&front];
            let fits_kv = replica.occupied_tokens + req.kv_footprint() <= variant.kv_capacity_tokens;
            let fits_slot = (replica.in_flight.len() as u32) < variant.max_concurrent_sequences;
            if !(fits_kv && fits_slot) {
                return;
            }
            let footprint = req.kv_footprint();
            let prefill_time = self.now + req.input_tokens as f64 / variant.prefill_rate;
            let request_id = front;

            let replica = self.replicas.get_mut(replica_id).unwrap();
            replica.queue.pop_front();
            replica.occupied_tokens += footprint;
            replica.in_flight.insert(
                request_id,
                ActiveRequest {
                    request_id,
                    stage: RequestStage::Prefill,
                    tokens_reserved: footprint,
                    started_at: self.now,
                    first_token_at: None,
                },
            );
            let occupied = replica.occupied_tokens;
            if let Some(rec) = self.records.get_mut(&request_id) {
                rec.admitted_at = Some(self.now);
            }
            self.log_line(
                self.now,
                "admit",
                replica_id,
                &request_id.to_string(),
                format!("occupied={occupied}"),
            );
            self.push_event(
                prefill_time,
                EventKind::PrefillDone {
                    replica: replica_id.to_string(),
                    request: request_id,
                },
            );
        }
    }

    fn on_prefill_done(&mut self, replica_id: &str, request_id: u64) {
        let Some(replica) = self.replicas.get_mut(replica_id) else {
            return;
        };
        let Some(active) = replica.in_flight.get_mut(&request_id) else {
            return; // dropped by a forced termination before prefill finished
        };
        active.stage = RequestStage::Decode;
        active.first_token_at = Some(self.now);
        let variant = &self.variants[&replica.variant_id];
        let req = &self.requests[&request_id];
        let done_at = self.now + req.output_tokens as f64 / variant.decode_rate;
        if let Some(rec) = self.records.get_mut(&request_id) {
            rec.first_token_at = Some(self.now);
        }
        self.log_line(
            self.now,
            "first_token",
            replica_id,
            &request_id.to_string(),
            String::new(),
        );
        self.push_event(
            done_at,
            EventKind::Completion {
                replica: replica_id.to_string(),
                request: request_id,
            },
        );
    }

    fn on_completion(&mut self, replica_id: &str, request_id: u64) {
        let Some(replica) = self.replicas.get_mut(replica_id) else {
            return;
        };
        let Some(active) = replica.in_flight.remove(&request_id) else {
            return;
        };
        replica.occupied_tokens -= active.tokens_reserved;
        let occupied = replica.occupied_tokens;
        self.completed += 1;
        if let Some(rec) = self.records.get_mut(&request_id) {
            rec.completed_at = Some(self.now);
        }
        self.log_line(
            self.now,
            "complete",
            replica_id,
            &request_id.to_string(),
            format!("occupied={occupied}"),
        );
        self.try_admit(replica_id);
        self.finish_drain_if_empty(replica_id);
    }

    fn on_replica_ready(&mut self, replica_id: &str) {
        let Some(replica) = self.replicas.get_mut(replica_id) else {
            return;
        };
        if replica.phase == ReplicaPhase::Provisioning {
            replica.phase = ReplicaPhase::Ready;
            self.log_line(self.now, "ready", replica_id, "-", String::new());
        }
    }

    fn on_drain_deadline(&mut self, replica_id: &str) {
        let phase = self.replicas.get(replica_id).map(|r| r.phase);
        if phase == Some(ReplicaPhase::Draining) {
            self.terminate(replica_id);
        }
    }

    fn finish_drain_if_empty(&mut self, replica_id: &str) {
        let r = &self.replicas[replica_id];
        if r.phase == ReplicaPhase::Draining && r.in_flight.is_empty() && r.queue.is_empty() {
            self.terminate(replica_id);
        }
    }

    /// Terminates a replica immediately; everything queued or in flight
    /// becomes a drop with cause `terminated`. Returns the drop count.
    fn terminate(&mut self, replica_id: &str) -> u64 {
        let replica = self.replicas.get_mut(replica_id).unwrap();
        replica.phase = ReplicaPhase::Terminated;
        replica.occupied_tokens = 0;
        let victims: Vec<u64> = replica
            .queue
            .drain(..)
            .chain(std::mem::take(&mut replica.in_flight).into_keys())
            .collect();
        for id in &victims {
            if let Some(rec) = self.records.get_mut(id) {
                rec.dropped = Some(DropCause::Terminated);
            }
            self.record_drop(*id, DropCause::Terminated);
        }
        self.log_line(
            self.now,
            "terminate",
            replica_id,
            "-",
            format!("dropped={}", victims.len()),
        );
        victims.len() as u64
    }

    /// Replica counts per phase for one variant.
    pub fn replica_counts(&self, variant_id: &str) -> ReplicaCounts {
        let mut c = ReplicaCounts::default();
        for r in self.replicas.values().filter(|r| r.variant_id == variant_id) {
            match r.phase {
                ReplicaPhase::Provisioning => c.provisioning += 1,
                ReplicaPhase::Ready => c.ready += 1,
                ReplicaPhase::Draining => c.draining += 1,
                ReplicaPhase::Terminated => {}
            }
        }
        c
    }

    /// Scales a variant toward `desired` active (provisioning + ready)
    /// replicas. Scale-down picks the emptiest replicas; with
    /// `drain_safe` they drain first, otherwise they are killed in place.
    pub fn apply_replica_target(
        &mut self,
        variant_id: &str,
        desired: u32,
        drain_safe: bool,
    ) -> Result<Vec<Transition>, InvalidTarget> {
        let variant = &self.variants[variant_id];
        if desired > variant.policy_params.max_replicas {
            return Err(InvalidTarget {
                variant_id: variant_id.to_string(),
                desired,
                max: variant.policy_params.max_replicas,
            });
        }
        let mut transitions = Vec::new();
        let current = self.replica_counts(variant_id).active();

        if desired > current {
            for _ in 0..desired - current {
                let n = self.replica_seq.entry(variant_id.to_string()).or_insert(0);
                let replica_id = format!("{variant_id}-{:04}", *n);
                *n += 1;
                let ready_at = self.now + self.provisioning_delay;
                self.replicas.insert(
                    replica_id.clone(),
                    ReplicaState {
                        replica_id: replica_id.clone(),
                        variant_id: variant_id.to_string(),
                        phase: ReplicaPhase::Provisioning,
                        ready_at,
                        occupied_tokens: 0,
                        queue: VecDeque::new(),
                        in_flight: BTreeMap::new(),
                    },
                );
                self.push_event(
                    ready_at,
                    EventKind::ReplicaReady {
                        replica: replica_id.clone(),
                    },
                );
                self.log_line(
                    self.now,
                    "provision",
                    &replica_id,
                    "-",
                    format!("ready_at={ready_at:.6}"),
                );
                transitions.push(Transition::Created {
                    replica_id,
                    ready_at_ms: (ready_at * 1000.0) as u64,
                });
            }
        } else if desired < current {
            let pool = self.replicas.values().filter(|r| {
                r.variant_id == variant_id
                    && matches!(r.phase, ReplicaPhase::Provisioning | ReplicaPhase::Ready)
            });
            let victims: Vec<String> = if drain_safe {
                // Emptiest first: fewest in flight, then lowest occupancy,
                // then highest replica id. Fresh provisioning replicas
                // sort first.
                let mut candidates: Vec<(u64, u64, std::cmp::Reverse<String>)> = pool
                    .map(|r| {
                        (
                            r.in_flight.len() as u64,
                            r.occupied_tokens,
                            std::cmp::Reverse(r.replica_id.clone()),
                        )
                    })
                    .collect();
                candidates.sort();
                candidates
                    .into_iter()
                    .map(|(_, _, std::cmp::Reverse(id))| id)
                    .collect()
            } else {
                // A kill-based controller deletes the newest pods first,
                // regardless of what they are serving.
                let mut ids: Vec<String> = pool.map(|r| r.replica_id.clone()).collect();
                ids.sort_by(|a, b| b.cmp(a));
                ids
            };
            for replica_id in victims.into_iter().take((current - desired) as usize)
            {
                let phase = self.replicas[&replica_id].phase;
                let idle = {
                    let r = &self.replicas[&replica_id];
                    r.in_flight.is_empty() && r.queue.is_empty()
                };
                if !drain_safe || phase == ReplicaPhase::Provisioning || idle {
                    let dropped = self.terminate(&replica_id);
                    transitions.push(Transition::Terminated {
                        replica_id,
                        dropped,
                    });
                } else {
                    self.replicas.get_mut(&replica_id).unwrap().phase = ReplicaPhase::Draining;
                    self.log_line(self.now, "drain", &replica_id, "-", String::new());
                    if self.drain_grace.is_finite() {
                        self.push_event(
                            self.now + self.drain_grace,
                            EventKind::DrainDeadline {
                                replica: replica_id.clone(),
                            },
                        );
                    }
                    transitions.push(Transition::Draining { replica_id });
                }
            }
        }
        Ok(transitions)
    }

    /// One snapshot per non-terminated replica, ordered by replica id.
    pub fn snapshot_metrics(&self) -> Vec<MetricSnapshot> {
        self.replicas
            .values()
            .filter(|r| r.phase != ReplicaPhase::Terminated)
            .map(|r| {
                let cap = self.variants[&r.variant_id].kv_capacity_tokens;
                MetricSnapshot {
                    replica_id: r.replica_id.clone(),
                    variant_id: r.variant_id.clone(),
                    tick_time: self.now,
                    kv_usage: r.occupied_tokens as f64 / cap as f64,
                    queue_depth: r.queue.len() as u64,
                    in_flight: r.in_flight.len() as u64,
                    stale: false,
                }
            })
            .collect()
    }

    /// Conservation check: summed replica occupancy equals summed
    /// reservations of in-flight requests, and capacity bounds hold.
    pub fn check_invariants(&self) {
        for r in self.replicas.values() {
            let variant = &self.variants[&r.variant_id];
            let reserved: u64 = r.in_flight.values().map(|a| a.tokens_reserved).sum();
            assert_eq!(
                r.occupied_tokens, reserved,
                "occupancy out of sync on {}",
                r.replica_id
            );
            assert!(
                r.occupied_tokens <= variant.kv_capacity_tokens,
                "KV capacity exceeded on {}",
                r.replica_id
            );
            assert!(
                r.in_flight.len() as u32 <= variant.max_concurrent_sequences,
                "concurrency cap exceeded on {}",
                r.replica_id
            );
            if r.phase == ReplicaPhase::Terminated {
                assert!(r.in_flight.is_empty() && r.queue.is_empty());
            }
        }
    }

    /// Finalizes counters into a [`SimOutcome`].
    pub fn outcome(&self) -> SimOutcome {
        let mut queued_at_end = 0;
        let mut in_flight_at_end = 0;
        for r in self.replicas.values() {
            queued_at_end += r.queue.len() as u64;
            in_flight_at_end += r.in_flight.len() as u64;
        }
        SimOutcome {
            records: self.records.values().cloned().collect(),
            arrived: self.arrived,
            completed: self.completed,
            dropped: self.dropped,
            drop_causes: self.drop_causes.clone(),
            queued_at_end,
            in_flight_at_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Baseline, FaultProgram, HpaParams, SaturationParams};
    use crate::workload::{ArrivalProcess, BoundedNormal, TrafficProgram};

    fn cfg_with_variant(v: VariantSpec) -> ScenarioConfig {
        ScenarioConfig {
            variants: vec![v],
            cluster_gpu_budget: None,
            traffic_program: TrafficProgram {
                phases: vec![(0.0, 1.0)],
                arrival_process: ArrivalProcess::DeterministicUniform,
                input_dist: BoundedNormal {
                    min: 10,
                    max: 8192,
                    mean: 4096.0,
                    stdev: 2048.0,
                },
                output_dist: BoundedNormal {
                    min: 10,
                    max: 2048,
                    mean: 1024.0,
                    stdev: 512.0,
                },
            },
            duration: 600.0,
            control_interval: 30.0,
            scale_from_zero_interval: 2.0,
            provisioning_delay: 30.0,
            drain_grace: f64::INFINITY,
            rng_seed: 1,
            scheduler_weights: [
                ("queue".to_string(), 1.0),
                ("kv".to_string(), 1.0),
                ("prefix".to_string(), 0.0),
            ]
            .into_iter()
            .collect(),
            hard_queue_cap: 10,
            baseline: Baseline::Wva,
            hpa_params: HpaParams::default(),
            faults: FaultProgram::default(),
        }
    }

    fn variant() -> VariantSpec {
        VariantSpec {
            variant_id: "a100".to_string(),
            model_id: "llama3-70b".to_string(),
            hardware_class: "A100".to_string(),
            quantization: None,
            gpus_per_replica: 1,
            variant_cost: 1.0,
            kv_capacity_tokens: 16384,
            max_concurrent_sequences: 256,
            prefill_rate: 8192.0,
            decode_rate: 1024.0,
            role: crate::domain::ReplicaRole::Unified,
            policy_params: SaturationParams::default(),
        }
    }

    fn req(id: u64, t: f64, input: u64, output: u64) -> RequestSpec {
        RequestSpec {
            request_id: id,
            arrival_time: t,
            input_tokens: input,
            output_tokens: output,
            prefix_key: None,
        }
    }

    fn ready_sim(cfg: &ScenarioConfig) -> Simulator {
        let mut sim = Simulator::new(cfg);
        sim.apply_replica_target("a100", 1, true).unwrap();
        sim.advance(cfg.provisioning_delay); // replica ready
        sim
    }

    #[test]
    fn provisioning_delay_honored() {
        let cfg = cfg_with_variant(variant());
        let mut sim = Simulator::new(&cfg);
        sim.apply_replica_target("a100", 1, true).unwrap();
        assert_eq!(sim.replica_counts("a100").provisioning, 1);
        sim.advance(29.999);
        assert_eq!(sim.replica_counts("a100").ready, 0);
        sim.advance(30.0);
        assert_eq!(sim.replica_counts("a100").ready, 1);
    }

    #[test]
    fn single_request_timing() {
        // input 4096 @ 8192 tok/s -> TTFT 0.5 s; output 1024 @ 1024 tok/s
        // -> completion 1.5 s; footprint 5120 tokens while in flight.
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[req(0, t0, 4096, 1024)]);
        sim.advance(t0 + 0.25);
        assert_eq!(sim.replica("a100-0000").unwrap().occupied_tokens, 5120);
        sim.advance(t0 + 2.0);
        let out = sim.outcome();
        let rec = &out.records[0];
        assert_eq!(rec.ttft(), Some(0.5));
        assert_eq!(rec.completed_at, Some(t0 + 1.5));
        assert_eq!(sim.replica("a100-0000").unwrap().occupied_tokens, 0);
        assert!(out.flow_conserved());
    }

    #[test]
    fn three_mean_requests_reach_93_75_percent() {
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[
            req(0, t0, 4096, 1024),
            req(1, t0, 4096, 1024),
            req(2, t0, 4096, 1024),
        ]);
        sim.advance(t0 + 0.1);
        let snap = sim.snapshot_metrics();
        assert_eq!(snap.len(), 1);
        assert_eq!(snap[0].kv_usage, 15360.0 / 16384.0);
        assert_eq!(snap[0].kv_usage, 0.9375);
    }

    #[test]
    fn fourth_request_waits_and_capacity_holds() {
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[
            req(0, t0, 4096, 1024),
            req(1, t0, 4096, 1024),
            req(2, t0, 4096, 1024),
            req(3, t0 + 0.1, 4096, 1024),
        ]);
        let mut t = t0;
        while t < t0 + 4.0 {
            t += 0.05;
            sim.advance(t);
            sim.check_invariants();
        }
        let out = sim.outcome();
        assert_eq!(out.completed, 4);
        // The 4th was queued, not dropped.
        assert_eq!(out.dropped, 0);
        assert!(out.records[3].admitted_at.unwrap() > t0 + 0.1);
    }

    #[test]
    fn drain_safe_with_infinite_grace_never_drops() {
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[req(0, t0, 4096, 1024), req(1, t0, 4096, 1024)]);
        sim.advance(t0 + 0.1);
        let tr = sim.apply_replica_target("a100", 0, true).unwrap();
        assert!(matches!(tr[0], Transition::Draining { .. }));
        sim.advance(t0 + 5.0);
        let out = sim.outcome();
        assert_eq!(out.dropped, 0);
        assert_eq!(out.completed, 2);
        assert_eq!(sim.replica_counts("a100").draining, 0);
    }

    #[test]
    fn drain_unsafe_kills_in_flight() {
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[req(0, t0, 4096, 1024), req(1, t0, 4096, 1024)]);
        sim.advance(t0 + 0.1);
        let tr = sim.apply_replica_target("a100", 0, false).unwrap();
        assert_eq!(
            tr,
            vec![Transition::Terminated {
                replica_id: "a100-0000".to_string(),
                dropped: 2
            }]
        );
        let out = sim.outcome();
        assert_eq!(out.drop_causes.get("terminated"), Some(&2));
        assert!(out.flow_conserved());
    }

    #[test]
    fn forced_drain_after_grace() {
        let mut cfg = cfg_with_variant(variant());
        cfg.drain_grace = 0.2;
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[req(0, t0, 4096, 1024)]);
        sim.advance(t0 + 0.1);
        sim.apply_replica_target("a100", 0, true).unwrap();
        sim.advance(t0 + 1.0);
        let out = sim.outcome();
        assert_eq!(out.drop_causes.get("terminated"), Some(&1));
    }

    #[test]
    fn invalid_target_rejected() {
        let cfg = cfg_with_variant(variant());
        let mut sim = Simulator::new(&cfg);
        assert!(sim.apply_replica_target("a100", 11, true).is_err());
    }

    #[test]
    fn no_ready_replica_drops() {
        let cfg = cfg_with_variant(variant());
        let mut sim = Simulator::new(&cfg);
        sim.inject_arrivals(&[req(0, 0.0, 100, 10)]);
        sim.advance(1.0);
        let out = sim.outcome();
        assert_eq!(out.drop_causes.get("no_ready_replica"), Some(&1));
    }

    #[test]
    fn draining_replica_still_reports_metrics() {
        let cfg = cfg_with_variant(variant());
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        sim.inject_arrivals(&[req(0, t0, 4096, 1024)]);
        sim.advance(t0 + 0.1);
        sim.apply_replica_target("a100", 0, true).unwrap();
        let snaps = sim.snapshot_metrics();
        assert_eq!(snaps.len(), 1);
        assert!(snaps[0].kv_usage > 0.0);
    }

    #[test]
    fn queue_full_burst_drops() {
        let mut v = variant();
        v.max_concurrent_sequences = 1;
        let mut cfg = cfg_with_variant(v);
        cfg.hard_queue_cap = 2;
        let mut sim = ready_sim(&cfg);
        let t0 = sim.now();
        // 1 admitted + 2 queued; the rest hit the hard cap.
        let burst: Vec<RequestSpec> = (0..6).map(|i| req(i, t0, 4096, 1024)).collect();
        sim.inject_arrivals(&burst);
        sim.advance(t0 + 0.01);
        let out = sim.outcome();
        assert_eq!(out.drop_causes.get("queue_full"), Some(&3));
        assert!(out.flow_conserved());
    }
}
