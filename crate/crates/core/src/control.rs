//! The reconciliation loop: decision cache, readiness gates,
//! scale-from-zero fast path, pool-level capacity distribution across
//! variants, constrained arbitration, and the HPA baseline policy.
//!
//! The decision core ([`WvaEngine::decide_pool`]) consumes only metric
//! snapshots and cached state, never the simulator, so a run can be
//! replayed bit-for-bit from an exported snapshot table.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{
    FaultProgram, HpaParams, MetricSnapshot, ScenarioConfig, TargetState, VariantSpec,
};
use crate::metrics_io::target_deleted;
use crate::optimizer::{optimize_constrained, optimize_unconstrained, AllocationRequest};
use crate::saturation::{
    compute_saturation, compute_target_replicas, replicas_for_kv, replicas_for_queue, safety_net,
    scaledown_guard_ok, Direction, SaturationReport, ScaleRecommendation,
};
use crate::sim::Simulator;

/// In-memory store of the latest optimization decision per model pool.
/// Writers replace whole entries; readers never observe a partial write.
#[derive(Debug, Default)]
pub struct DecisionCache {
    entries: Mutex<HashMap<String, TargetState>>,
    last_trigger_at: Mutex<Option<f64>>,
}

impl DecisionCache {
    pub fn get(&self, model_id: &str) -> Option<TargetState> {
        self.entries.lock().unwrap().get(model_id).cloned()
    }

    pub fn put(&self, state: TargetState) {
        self.entries
            .lock()
            .unwrap()
            .insert(state.model_id.clone(), state);
    }

    pub fn signal_trigger(&self, now: f64) {
        *self.last_trigger_at.lock().unwrap() = Some(now);
    }

    pub fn last_trigger_at(&self) -> Option<f64> {
        *self.last_trigger_at.lock().unwrap()
    }
}

/// Mirror of the per-variant control-plane resource: spec, status
/// conditions, and the replica count last observed on the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantAutoscalingRecord {
    pub model_id: String,
    pub variant_id: String,
    pub variant_cost: f64,
    pub scale_target: String,
    pub desired_optimized_alloc: u32,
    pub target_resolved: bool,
    pub metrics_available: bool,
    pub condition_reason: String,
    pub observed_replicas: u32,
}

/// A scaling instruction for the simulated cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub variant_id: String,
    pub target_replicas: u32,
    pub drain_safe: bool,
    pub issued_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    #[default]
    Unconstrained,
    Constrained,
}

/// One decision-trace record per tick per variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub tick: f64,
    pub model_id: String,
    pub variant_id: String,
    pub current: u32,
    pub stale: bool,
    pub saturated: u64,
    pub nonsaturated: u64,
    pub avg_spare_kv: Option<f64>,
    pub avg_spare_q: Option<f64>,
    pub trigger_kv: bool,
    pub trigger_q: bool,
    pub direction: String,
    pub reason: String,
    pub desired_pre_arbiter: u32,
    pub granted: u32,
    pub gate_target_resolved: bool,
    pub gate_metrics_available: bool,
    pub command_target: Option<u32>,
}

/// The decision for one pool at one tick.
#[derive(Debug, Clone)]
pub struct PoolDecision {
    pub target: TargetState,
    pub rows: Vec<TraceRow>,
}

/// The optimization engine: model analyzer plus global arbiter, writing
/// into the decision cache.
pub struct WvaEngine {
    cfg: ScenarioConfig,
    pub mode: OptimizerMode,
    pub budget_gpus: Option<u64>,
    /// Usable GPUs per hardware class, when an inventory constrains them.
    pub class_caps: Option<BTreeMap<String, u64>>,
    /// Seconds after a fired trigger during which scale-down is refused.
    /// Damps the up/down thrash a step-shaped load would otherwise cause.
    pub scaledown_hold: f64,
    pub cache: DecisionCache,
}

impl WvaEngine {
    pub fn new(cfg: &ScenarioConfig, mode: OptimizerMode, budget_gpus: Option<u64>) -> Self {
        Self {
            cfg: cfg.clone(),
            mode,
            budget_gpus,
            class_caps: None,
            scaledown_hold: 2.0 * cfg.control_interval,
            cache: DecisionCache::default(),
        }
    }

    fn max_replicas_for(&self, variant: &VariantSpec) -> u32 {
        let mut max = variant.policy_params.max_replicas;
        if self.mode == OptimizerMode::Constrained {
            if let Some(caps) = &self.class_caps {
                let class_gpus = caps.get(&variant.hardware_class).copied().unwrap_or(0);
                max = max.min((class_gpus / variant.gpus_per_replica as u64) as u32);
            }
        }
        max
    }

    /// Distributes pool load over variants in ascending cost order: each
    /// variant absorbs as much of the remaining load as its replica cap
    /// allows before the next (more expensive) tier is considered.
    fn cheapest_first_fill(
        &self,
        pool: &[&VariantSpec],
        mut rem_tokens: u64,
        mut rem_queue: u64,
    ) -> BTreeMap<String, u32> {
        let any_load = rem_tokens > 0 || rem_queue > 0;
        let mut first_tier = true;
        let mut fill = BTreeMap::new();
        for v in pool {
            let p = &v.policy_params;
            let need = replicas_for_kv(rem_tokens, v).max(replicas_for_queue(rem_queue, p));
            let floor = if any_load && first_tier { 1 } else { p.min_replicas };
            let n = need.max(floor).clamp(p.min_replicas, self.max_replicas_for(v));
            fill.insert(v.variant_id.clone(), n);

            let tok_cover = (n as u64) as f64 * v.kv_capacity_tokens as f64 * (p.tau_kv - p.gamma_kv);
            rem_tokens = rem_tokens.saturating_sub(tok_cover as u64);
            let q_cover = n as f64 * (p.tau_q as f64 - p.gamma_q).max(1.0);
            rem_queue = rem_queue.saturating_sub(q_cover as u64);
            first_tier = false;
        }
        fill
    }

    /// The model-analyzer + arbiter pass for one pool. `snapshots` must be
    /// every reporting (non-terminated) replica of the pool's variants,
    /// stale flags included.
    pub fn decide_pool(
        &self,
        now: f64,
        model_id: &str,
        snapshots: &[MetricSnapshot],
        faults: &FaultProgram,
    ) -> PoolDecision {
        let pool = self.cfg.pool_variants(model_id);
        let all_stale = !snapshots.is_empty() && snapshots.iter().all(|s| s.stale);

        if all_stale {
            return self.safety_net_decision(now, model_id, &pool, snapshots, faults);
        }

        let mut by_variant: BTreeMap<&str, Vec<MetricSnapshot>> = BTreeMap::new();
        for v in &pool {
            by_variant.insert(v.variant_id.as_str(), Vec::new());
        }
        for s in snapshots {
            if let Some(list) = by_variant.get_mut(s.variant_id.as_str()) {
                if !s.stale {
                    list.push(s.clone());
                }
            }
        }

        let mut reports: BTreeMap<&str, SaturationReport> = BTreeMap::new();
        let mut recs: BTreeMap<&str, ScaleRecommendation> = BTreeMap::new();
        for v in &pool {
            let snaps = &by_variant[v.variant_id.as_str()];
            let report = compute_saturation(&v.variant_id, snaps, &v.policy_params);
            let rec = compute_target_replicas(&report, snaps, &v.policy_params, v);
            reports.insert(v.variant_id.as_str(), report);
            recs.insert(v.variant_id.as_str(), rec);
        }

        let pool_trigger = reports.values().any(|r| r.triggered());
        let pool_tokens: u64 = pool
            .iter()
            .flat_map(|v| {
                by_variant[v.variant_id.as_str()]
                    .iter()
                    .map(|s| (s.kv_usage * v.kv_capacity_tokens as f64).round() as u64)
            })
            .sum();
        let pool_queue: u64 = snapshots
            .iter()
            .filter(|s| !s.stale)
            .map(|s| s.queue_depth)
            .sum();

        let fill = self.cheapest_first_fill(&pool, pool_tokens, pool_queue);

        if pool_trigger {
            self.cache.signal_trigger(now);
        }
        let in_holdoff = self
            .cache
            .last_trigger_at()
            .is_some_and(|t| now - t < self.scaledown_hold);

        // Per-variant direction gating over the pool fill. Scale-up only on
        // a fired trigger; scale-down one replica per pool per tick, most
        // expensive tier first, behind the fragmentation guard.
        let mut desired: BTreeMap<String, u32> = BTreeMap::new();
        let mut directions: BTreeMap<String, (Direction, String)> = BTreeMap::new();
        let mut down_spent = false;
        for v in pool.iter().rev() {
            let id = v.variant_id.as_str();
            let current = by_variant[id].len() as u32;
            let target = fill[id];
            let rec = &recs[id];
            let (dir, want, reason) = if target > current {
                if pool_trigger {
                    (Direction::Up, target, rec.reason.clone())
                } else if current < v.policy_params.min_replicas {
                    (Direction::Up, target, "min-replicas".to_string())
                } else {
                    (Direction::Hold, current, "no-trigger".to_string())
                }
            } else if target < current && !down_spent && !in_holdoff {
                let guard = scaledown_guard_ok(&reports[id], &by_variant[id], &v.policy_params);
                if guard && current > v.policy_params.min_replicas {
                    down_spent = true;
                    (Direction::Down, current - 1, "scale-down".to_string())
                } else {
                    (Direction::Hold, current, "scale-down-guarded".to_string())
                }
            } else {
                (Direction::Hold, current, rec.reason.clone())
            };
            desired.insert(id.to_string(), want);
            directions.insert(id.to_string(), (dir, reason));
        }

        // Arbitration across the cluster budget.
        let requests: Vec<AllocationRequest> = pool
            .iter()
            .map(|v| AllocationRequest {
                variant_id: v.variant_id.clone(),
                model_id: model_id.to_string(),
                current_replicas: by_variant[v.variant_id.as_str()].len() as u32,
                desired_replicas: desired[&v.variant_id],
                gpus_per_replica: v.gpus_per_replica,
                variant_cost: v.variant_cost,
                spare_capacity: recs[v.variant_id.as_str()].spare_capacity,
            })
            .collect();
        let allocation = match (self.mode, self.budget_gpus) {
            (OptimizerMode::Constrained, Some(budget)) => optimize_constrained(&requests, budget),
            _ => optimize_unconstrained(&requests),
        };

        let reason = directions
            .values()
            .find(|(d, _)| *d != Direction::Hold)
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| "steady".to_string());
        let target = TargetState {
            model_id: model_id.to_string(),
            per_variant_desired: allocation.per_variant_granted.clone(),
            metrics_available: true,
            computed_at: now,
            reason,
        };

        let rows = pool
            .iter()
            .map(|v| {
                let id = v.variant_id.as_str();
                let report = &reports[id];
                let (dir, reason) = &directions[&v.variant_id];
                TraceRow {
                    tick: now,
                    model_id: model_id.to_string(),
                    variant_id: v.variant_id.clone(),
                    current: by_variant[id].len() as u32,
                    stale: false,
                    saturated: report.saturated.len() as u64,
                    nonsaturated: report.nonsaturated.len() as u64,
                    avg_spare_kv: report.avg_spare_kv,
                    avg_spare_q: report.avg_spare_q,
                    trigger_kv: report.trigger_kv,
                    trigger_q: report.trigger_q,
                    direction: format!("{dir:?}").to_lowercase(),
                    reason: reason.clone(),
                    desired_pre_arbiter: desired[&v.variant_id],
                    granted: allocation.per_variant_granted[&v.variant_id],
                    gate_target_resolved: !target_deleted(faults, now, &v.variant_id),
                    gate_metrics_available: true,
                    command_target: None,
                }
            })
            .collect();

        PoolDecision { target, rows }
    }

    fn safety_net_decision(
        &self,
        now: f64,
        model_id: &str,
        pool: &[&VariantSpec],
        snapshots: &[MetricSnapshot],
        faults: &FaultProgram,
    ) -> PoolDecision {
        let last_good = self.cache.get(model_id).unwrap_or_else(|| TargetState {
            model_id: model_id.to_string(),
            per_variant_desired: pool
                .iter()
                .map(|v| {
                    let n = snapshots
                        .iter()
                        .filter(|s| s.variant_id == v.variant_id)
                        .count() as u32;
                    (v.variant_id.clone(), n)
                })
                .collect(),
            metrics_available: true,
            computed_at: now,
            reason: "bootstrap".to_string(),
        });
        let target = safety_net(&last_good, false, now);
        let rows = pool
            .iter()
            .map(|v| TraceRow {
                tick: now,
                model_id: model_id.to_string(),
                variant_id: v.variant_id.clone(),
                current: snapshots
                    .iter()
                    .filter(|s| s.variant_id == v.variant_id)
                    .count() as u32,
                stale: true,
                saturated: 0,
                nonsaturated: 0,
                avg_spare_kv: None,
                avg_spare_q: None,
                trigger_kv: false,
                trigger_q: false,
                direction: "hold".to_string(),
                reason: "safety-net".to_string(),
                desired_pre_arbiter: *target.per_variant_desired.get(&v.variant_id).unwrap_or(&0),
                granted: *target.per_variant_desired.get(&v.variant_id).unwrap_or(&0),
                gate_target_resolved: !target_deleted(faults, now, &v.variant_id),
                gate_metrics_available: false,
                command_target: None,
            })
            .collect();
        PoolDecision { target, rows }
    }
}

/// The live control plane wiring the engine and reconciler to a simulator.
pub struct ControlPlane {
    pub engine: WvaEngine,
    cfg: ScenarioConfig,
    pub records: BTreeMap<String, VariantAutoscalingRecord>,
    pub trace: Vec<TraceRow>,
    pub targets_log: Vec<TargetState>,
    /// Every snapshot the optimizer consumed, as it saw it (staleness
    /// applied), keyed by tick via `tick_time`. Re-feeding these through
    /// the decision core must reproduce `targets_log` exactly.
    pub snapshots_log: Vec<MetricSnapshot>,
    pub commands_emitted: u64,
    arrivals_at_last_fast_tick: u64,
    hpa_history: BTreeMap<String, Vec<(f64, u32)>>,
}

impl ControlPlane {
    pub fn new(cfg: &ScenarioConfig, mode: OptimizerMode, budget_gpus: Option<u64>) -> Self {
        let records = cfg
            .variants
            .iter()
            .map(|v| {
                (
                    v.variant_id.clone(),
                    VariantAutoscalingRecord {
                        model_id: v.model_id.clone(),
                        variant_id: v.variant_id.clone(),
                        variant_cost: v.variant_cost,
                        scale_target: format!("deployment-{}", v.variant_id),
                        desired_optimized_alloc: 0,
                        target_resolved: true,
                        metrics_available: true,
                        condition_reason: "initial".to_string(),
                        observed_replicas: 0,
                    },
                )
            })
            .collect();
        Self {
            engine: WvaEngine::new(cfg, mode, budget_gpus),
            cfg: cfg.clone(),
            records,
            trace: Vec::new(),
            targets_log: Vec::new(),
            snapshots_log: Vec::new(),
            commands_emitted: 0,
            arrivals_at_last_fast_tick: 0,
            hpa_history: BTreeMap::new(),
        }
    }

    /// One full optimization + reconciliation pass. Emits actuation
    /// commands (drain-safe) only for variants whose gates hold and whose
    /// granted allocation differs from the observed replica count.
    pub fn control_tick(&mut self, now: f64, sim: &Simulator) -> Vec<ActuationCommand> {
        let mut snapshots = sim.snapshot_metrics();
        for s in &mut snapshots {
            s.tick_time = now;
            s.stale = self
                .cfg
                .faults
                .outages
                .iter()
                .any(|o| now >= o.start && now < o.end && (o.scope == "all" || o.scope == format!("variant:{}", s.variant_id)));
        }

        self.snapshots_log.extend(snapshots.iter().cloned());

        let mut commands = Vec::new();
        for model_id in self.cfg.model_ids() {
            let pool_snaps: Vec<MetricSnapshot> = snapshots
                .iter()
                .filter(|s| {
                    self.cfg
                        .variant(&s.variant_id)
                        .is_some_and(|v| v.model_id == model_id)
                })
                .cloned()
                .collect();
            let mut decision = self.engine.decide_pool(now, &model_id, &pool_snaps, &self.cfg.faults);
            self.engine.cache.put(decision.target.clone());
            self.targets_log.push(decision.target.clone());

            for row in &mut decision.rows {
                let variant_id = row.variant_id.clone();
                let observed = sim.replica_counts(&variant_id).active();
                let granted = decision
                    .target
                    .per_variant_desired
                    .get(&variant_id)
                    .copied()
                    .unwrap_or(0);
                let rec = self.records.get_mut(&variant_id).unwrap();
                rec.observed_replicas = observed;
                rec.target_resolved = row.gate_target_resolved;
                rec.metrics_available = row.gate_metrics_available;

                let gates_ok = row.gate_target_resolved && row.gate_metrics_available;
                let safety_floor = !row.gate_metrics_available
                    && row.gate_target_resolved
                    && observed < granted;
                if (gates_ok || safety_floor) && granted != observed {
                    rec.desired_optimized_alloc = granted;
                    rec.condition_reason = decision.target.reason.clone();
                    row.command_target = Some(granted);
                    commands.push(ActuationCommand {
                        variant_id,
                        target_replicas: granted,
                        drain_safe: true,
                        issued_at: now,
                    });
                } else if gates_ok {
                    rec.desired_optimized_alloc = granted;
                    rec.condition_reason = decision.target.reason.clone();
                } else {
                    rec.condition_reason = if !row.gate_target_resolved {
                        "TargetNotFound".to_string()
                    } else {
                        "MetricsUnavailable".to_string()
                    };
                }
            }
            self.trace.extend(decision.rows);
        }
        self.commands_emitted += commands.len() as u64;
        commands
    }

    /// High-frequency cold-start path: a pool with zero active replicas
    /// and at least one arrival since the previous fast tick gets one
    /// replica immediately, without waiting for the optimizer.
    pub fn scale_from_zero_tick(&mut self, now: f64, sim: &Simulator) -> Vec<ActuationCommand> {
        let arrivals = sim.arrivals_seen();
        let pending = arrivals > self.arrivals_at_last_fast_tick;
        self.arrivals_at_last_fast_tick = arrivals;

        let mut commands = Vec::new();
        if !pending {
            return commands;
        }
        for model_id in self.cfg.model_ids() {
            let pool = self.cfg.pool_variants(&model_id);
            let active: u32 = pool
                .iter()
                .map(|v| sim.replica_counts(&v.variant_id).active())
                .sum();
            if active > 0 {
                continue;
            }
            // Cheapest resolvable variant gets the cold-start replica.
            let Some(v) = pool
                .iter()
                .find(|v| !target_deleted(&self.cfg.faults, now, &v.variant_id))
            else {
                continue;
            };
            let target = 1.max(v.policy_params.min_replicas);
            self.engine.cache.put(TargetState {
                model_id: model_id.clone(),
                per_variant_desired: BTreeMap::from([(v.variant_id.clone(), target)]),
                metrics_available: true,
                computed_at: now,
                reason: "scale-from-zero".to_string(),
            });
            commands.push(ActuationCommand {
                variant_id: v.variant_id.clone(),
                target_replicas: target,
                drain_safe: true,
                issued_at: now,
            });
        }
        self.commands_emitted += commands.len() as u64;
        commands
    }

    /// The HPA baseline: per-variant proportional control on average queue
    /// depth and average KV usage, with a tolerance band and a scale-down
    /// stabilization window. Commands are drain-unsafe.
    pub fn hpa_tick(&mut self, now: f64, sim: &Simulator, params: &HpaParams) -> Vec<ActuationCommand> {
        let snapshots = sim.snapshot_metrics();
        let mut commands = Vec::new();
        for v in &self.cfg.variants {
            let current = sim.replica_counts(&v.variant_id).active();
            if current == 0 {
                continue;
            }
            let snaps: Vec<&MetricSnapshot> = snapshots
                .iter()
                .filter(|s| s.variant_id == v.variant_id && !s.stale)
                .collect();
            if snaps.is_empty() {
                continue;
            }
            let n = snaps.len() as f64;
            let avg_q: f64 = snaps.iter().map(|s| s.queue_depth as f64).sum::<f64>() / n;
            let avg_kv: f64 = snaps.iter().map(|s| s.kv_usage).sum::<f64>() / n;

            let desired_for = |ratio: f64| -> u32 {
                if (ratio - 1.0).abs() <= params.tolerance {
                    current
                } else {
                    (current as f64 * ratio).ceil() as u32
                }
            };
            let desired = desired_for(avg_q / params.target_avg_queue)
                .max(desired_for(avg_kv / params.target_avg_kv))
                .clamp(v.policy_params.min_replicas.max(1), v.policy_params.max_replicas);

            let history = self.hpa_history.entry(v.variant_id.clone()).or_default();
            history.push((now, desired));
            history.retain(|(t, _)| now - *t <= params.stabilization_window);

            let target = if desired >= current {
                desired
            } else {
                // Scale-down only to the max recommendation in the window.
                history.iter().map(|(_, d)| *d).max().unwrap_or(desired)
            };
            if target != current {
                commands.push(ActuationCommand {
                    variant_id: v.variant_id.clone(),
                    target_replicas: target.min(v.policy_params.max_replicas),
                    drain_safe: false,
                    issued_at: now,
                });
            }
        }
        self.commands_emitted += commands.len() as u64;
        commands
    }
}
