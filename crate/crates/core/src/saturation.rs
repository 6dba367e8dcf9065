//! Saturation analysis: the saturated replica set, the headroom trigger,
//! closed-form capacity targets, and the fragmentation-aware scale-down
//! guard. All functions here are pure over metric snapshots.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{MetricSnapshot, SaturationParams, TargetState, VariantSpec};

/// Saturation state of one variant's replica set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub variant_id: String,
    pub saturated: BTreeSet<String>,
    pub nonsaturated: BTreeSet<String>,
    /// tau_kv minus the mean KV usage over the non-saturated set.
    /// None when every reporting replica is saturated (degenerate).
    pub avg_spare_kv: Option<f64>,
    /// tau_q minus the mean queue depth over the non-saturated set.
    pub avg_spare_q: Option<f64>,
    pub trigger_kv: bool,
    pub trigger_q: bool,
}

impl SaturationReport {
    pub fn triggered(&self) -> bool {
        self.trigger_kv || self.trigger_q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Hold,
    Down,
}

/// Per-variant scaling recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecommendation {
    pub variant_id: String,
    pub current: u32,
    /// The closed-form capacity target (clamped to variant bounds); on a
    /// permitted scale-down this is current - 1. Actuated only when
    /// direction is not Hold.
    pub desired: u32,
    pub direction: Direction,
    pub reason: String,
    /// Normalized remaining headroom in [0, 1]; the priority key for the
    /// constrained arbiter (smaller = closer to saturation).
    pub spare_capacity: f64,
}

/// Computes the saturated set and the headroom trigger for one variant.
///
/// A replica is saturated when `kv_usage >= tau_kv` or
/// `queue_depth >= tau_q` (boundary inclusive). The trigger for a metric
/// fires when the average spare below its threshold over the non-saturated
/// set drops below gamma; with a non-empty replica set that is entirely
/// saturated the trigger is defined true.
pub fn compute_saturation(
    variant_id: &str,
    snapshots: &[MetricSnapshot],
    params: &SaturationParams,
) -> SaturationReport {
    let mut saturated = BTreeSet::new();
    let mut nonsaturated = BTreeSet::new();
    for s in snapshots {
        debug_assert_eq!(s.variant_id, variant_id);
        if s.kv_usage >= params.tau_kv || s.queue_depth >= params.tau_q {
            saturated.insert(s.replica_id.clone());
        } else {
            nonsaturated.insert(s.replica_id.clone());
        }
    }

    if snapshots.is_empty() {
        return SaturationReport {
            variant_id: variant_id.to_string(),
            saturated,
            nonsaturated,
            avg_spare_kv: None,
            avg_spare_q: None,
            trigger_kv: false,
            trigger_q: false,
        };
    }

    if nonsaturated.is_empty() {
        // Everything saturated: the strongest possible scale-up signal.
        return SaturationReport {
            variant_id: variant_id.to_string(),
            saturated,
            nonsaturated,
            avg_spare_kv: None,
            avg_spare_q: None,
            trigger_kv: true,
            trigger_q: true,
        };
    }

    let n = nonsaturated.len() as f64;
    let (mut kv_sum, mut q_sum) = (0.0, 0.0);
    for s in snapshots {
        if nonsaturated.contains(&s.replica_id) {
            kv_sum += params.tau_kv - s.kv_usage;
            q_sum += params.tau_q as f64 - s.queue_depth as f64;
        }
    }
    let avg_spare_kv = kv_sum / n;
    let avg_spare_q = q_sum / n;
    SaturationReport {
        variant_id: variant_id.to_string(),
        saturated,
        nonsaturated,
        avg_spare_kv: Some(avg_spare_kv),
        avg_spare_q: Some(avg_spare_q),
        trigger_kv: avg_spare_kv < params.gamma_kv,
        trigger_q: avg_spare_q < params.gamma_q,
    }
}

/// Replica count needed to carry `total_occupied_tokens` while keeping the
/// average KV spare at gamma_kv.
pub fn replicas_for_kv(total_occupied_tokens: u64, variant: &VariantSpec) -> u32 {
    let p = &variant.policy_params;
    let per_replica = variant.kv_capacity_tokens as f64 * (p.tau_kv - p.gamma_kv);
    (total_occupied_tokens as f64 / per_replica).ceil() as u32
}

/// Replica count needed to hold `total_queued` requests at the queue margin.
pub fn replicas_for_queue(total_queued: u64, params: &SaturationParams) -> u32 {
    let per_replica = (params.tau_q as f64 - params.gamma_q).max(1.0);
    (total_queued as f64 / per_replica).ceil() as u32
}

/// The closed-form capacity target for one variant's load, clamped to its
/// replica bounds.
pub fn closed_form_target(
    total_occupied_tokens: u64,
    total_queued: u64,
    variant: &VariantSpec,
) -> u32 {
    let p = &variant.policy_params;
    let n_kv = replicas_for_kv(total_occupied_tokens, variant);
    let n_q = replicas_for_queue(total_queued, p);
    let any_load = total_occupied_tokens > 0 || total_queued > 0;
    let floor = if any_load { 1 } else { p.min_replicas };
    n_kv.max(n_q).max(floor).clamp(p.min_replicas, p.max_replicas)
}

/// Evaluates the headroom trigger over a reduced replica set (the
/// non-saturated replicas minus one removal candidate). Returns true when
/// the remaining average spare stays at or above gamma for BOTH metrics.
pub fn projected_spare_ok(
    snapshots: &[MetricSnapshot],
    remaining: &BTreeSet<String>,
    params: &SaturationParams,
) -> bool {
    if remaining.is_empty() {
        return false;
    }
    let n = remaining.len() as f64;
    let (mut kv_sum, mut q_sum) = (0.0, 0.0);
    for s in snapshots {
        if remaining.contains(&s.replica_id) {
            kv_sum += params.tau_kv - s.kv_usage;
            q_sum += params.tau_q as f64 - s.queue_depth as f64;
        }
    }
    kv_sum / n >= params.gamma_kv && q_sum / n >= params.gamma_q
}

/// The replica that scale-down would actually remove: the emptiest
/// non-saturated one (max KV spare, then lowest queue, then highest id).
pub fn scaledown_candidate(
    snapshots: &[MetricSnapshot],
    nonsaturated: &BTreeSet<String>,
) -> Option<String> {
    snapshots
        .iter()
        .filter(|s| nonsaturated.contains(&s.replica_id))
        .max_by(|a, b| {
            b.kv_usage
                .total_cmp(&a.kv_usage)
                .then_with(|| b.queue_depth.cmp(&a.queue_depth))
                .then_with(|| a.replica_id.cmp(&b.replica_id))
        })
        .map(|s| s.replica_id.clone())
}

/// Whether removing one replica is safe: strictly more than
/// `min_nonsaturated_for_scaledown` non-saturated replicas exist, and the
/// headroom margin still holds over the survivors of the planned removal.
pub fn scaledown_guard_ok(
    report: &SaturationReport,
    snapshots: &[MetricSnapshot],
    params: &SaturationParams,
) -> bool {
    if report.nonsaturated.len() as u64 <= params.min_nonsaturated_for_scaledown {
        return false;
    }
    let Some(victim) = scaledown_candidate(snapshots, &report.nonsaturated) else {
        return false;
    };
    let mut remaining = report.nonsaturated.clone();
    remaining.remove(&victim);
    projected_spare_ok(snapshots, &remaining, params)
}

fn spare_capacity(report: &SaturationReport, params: &SaturationParams) -> f64 {
    match (report.avg_spare_kv, report.avg_spare_q) {
        (Some(kv), Some(q)) => {
            let kv_norm = kv / params.tau_kv;
            let q_norm = q / params.tau_q as f64;
            kv_norm.min(q_norm).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

/// Derives the per-variant scale recommendation from a saturation report.
///
/// Scale-up jumps straight to the closed-form target and only when the
/// trigger fired. Scale-down steps by one replica per tick and only when
/// the fragmentation guard allows it.
pub fn compute_target_replicas(
    report: &SaturationReport,
    snapshots: &[MetricSnapshot],
    params: &SaturationParams,
    variant: &VariantSpec,
) -> ScaleRecommendation {
    let current = snapshots.len() as u32;
    let total_occupied: u64 = snapshots
        .iter()
        .map(|s| (s.kv_usage * variant.kv_capacity_tokens as f64).round() as u64)
        .sum();
    let total_queued: u64 = snapshots.iter().map(|s| s.queue_depth).sum();
    let target = closed_form_target(total_occupied, total_queued, variant);

    let (direction, desired, reason) = if report.triggered() && target > current {
        let reason = if report.trigger_kv {
            "headroom-breach-kv"
        } else {
            "headroom-breach-q"
        };
        (Direction::Up, target, reason)
    } else if current > params.min_replicas && scaledown_guard_ok(report, snapshots, params) {
        (Direction::Down, current - 1, "scale-down")
    } else if target < current {
        (Direction::Hold, target, "scale-down-guarded")
    } else {
        (Direction::Hold, current.clamp(params.min_replicas, params.max_replicas), "steady")
    };

    ScaleRecommendation {
        variant_id: variant.variant_id.clone(),
        current,
        desired,
        direction,
        reason: reason.to_string(),
        spare_capacity: spare_capacity(report, params),
    }
}

/// Metric-outage fallback: hold the last known good allocation with a
/// floor of one replica per variant.
pub fn safety_net(last_good: &TargetState, metrics_available: bool, now: f64) -> TargetState {
    if metrics_available {
        return last_good.clone();
    }
    TargetState {
        model_id: last_good.model_id.clone(),
        per_variant_desired: last_good
            .per_variant_desired
            .iter()
            .map(|(v, &n)| (v.clone(), n.max(1)))
            .collect(),
        metrics_available: false,
        computed_at: now,
        reason: "safety-net".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ReplicaRole;
    use std::collections::BTreeMap;

    fn snap(id: &str, kv: f64, q: u64) -> MetricSnapshot {
        MetricSnapshot {
            replica_id: id.to_string(),
            variant_id: "a100".to_string(),
            tick_time: 0.0,
            kv_usage: kv,
            queue_depth: q,
            in_flight: 0,
            stale: false,
        }
    }

    fn params() -> SaturationParams {
        SaturationParams::default()
    }

    fn variant() -> VariantSpec {
        VariantSpec {
            variant_id: "a100".to_string(),
            model_id: "m".to_string(),
            hardware_class: "A100".to_string(),
            quantization: None,
            gpus_per_replica: 1,
            variant_cost: 1.0,
            kv_capacity_tokens: 16384,
            max_concurrent_sequences: 256,
            prefill_rate: 8192.0,
            decode_rate: 1024.0,
            role: ReplicaRole::Unified,
            policy_params: params(),
        }
    }

    #[test]
    fn kv_over_tau_is_saturated() {
        let snaps = vec![snap("r1", 0.85, 0), snap("r2", 0.4, 0)];
        let rep = compute_saturation("a100", &snaps, &params());
        assert_eq!(rep.saturated, ["r1".to_string()].into_iter().collect());
        assert_eq!(rep.nonsaturated, ["r2".to_string()].into_iter().collect());
    }

    #[test]
    fn queue_boundary_is_inclusive() {
        let snaps = vec![snap("r1", 0.1, 5)];
        let rep = compute_saturation("a100", &snaps, &params());
        assert!(rep.saturated.contains("r1"));
    }

    #[test]
    fn kv_boundary_is_inclusive() {
        let snaps = vec![snap("r1", 0.8, 0)];
        let rep = compute_saturation("a100", &snaps, &params());
        assert!(rep.saturated.contains("r1"));
    }

    #[test]
    fn trigger_fires_below_gamma() {
        // Spares 0.25 each, gamma_kv 0.3 -> avg 0.25 < 0.3.
        let snaps = vec![snap("r1", 0.55, 0), snap("r2", 0.55, 0)];
        let rep = compute_saturation("a100", &snaps, &params());
        assert!((rep.avg_spare_kv.unwrap() - 0.25).abs() < 1e-12);
        assert!(rep.trigger_kv);
        assert!(!rep.trigger_q);
    }

    #[test]
    fn all_saturated_is_degenerate_trigger() {
        let snaps = vec![snap("r1", 0.9, 0), snap("r2", 0.85, 0)];
        let rep = compute_saturation("a100", &snaps, &params());
        assert!(rep.nonsaturated.is_empty());
        assert!(rep.trigger_kv && rep.trigger_q);
        assert_eq!(rep.avg_spare_kv, None);
    }

    #[test]
    fn empty_set_never_triggers() {
        let rep = compute_saturation("a100", &[], &params());
        assert!(!rep.triggered());
    }

    #[test]
    fn closed_form_two_replicas_for_full_footprints() {
        // 15360 occupied / (16384 * (0.8 - 0.3)) = 1.875 -> 2 replicas.
        assert_eq!(replicas_for_kv(15360, &variant()), 2);
    }

    #[test]
    fn zero_load_holds_single_idle_replica() {
        let snaps = vec![snap("r1", 0.0, 0)];
        let rep = compute_saturation("a100", &snaps, &params());
        let rec = compute_target_replicas(&rep, &snaps, &params(), &variant());
        // Closed-form target is 0, but with only 1 non-saturated replica the
        // fragmentation guard (needs > 2) refuses the removal.
        assert_eq!(rec.desired, 0);
        assert_eq!(rec.direction, Direction::Hold);
    }

    #[test]
    fn scaledown_allowed_with_three_spares() {
        // 4 replicas: 1 saturated, 3 non-saturated with spare 0.45 each.
        let snaps = vec![
            snap("r1", 0.9, 0),
            snap("r2", 0.35, 0),
            snap("r3", 0.35, 0),
            snap("r4", 0.35, 0),
        ];
        let rep = compute_saturation("a100", &snaps, &params());
        assert_eq!(rep.nonsaturated.len(), 3);
        let rec = compute_target_replicas(&rep, &snaps, &params(), &variant());
        assert_eq!(rec.direction, Direction::Down);
        assert_eq!(rec.desired, 3);
    }

    /// Brute force over every (|R\S|-1)-subset: the guard's chosen reduced
    /// set must be one of them and must satisfy the non-trigger condition.
    #[test]
    fn scaledown_projection_matches_subset_brute_force() {
        let snaps = vec![
            snap("r1", 0.9, 0),
            snap("r2", 0.35, 0),
            snap("r3", 0.35, 1),
            snap("r4", 0.30, 0),
        ];
        let p = params();
        let rep = compute_saturation("a100", &snaps, &p);
        let victim = scaledown_candidate(&snaps, &rep.nonsaturated).unwrap();
        let mut remaining = rep.nonsaturated.clone();
        remaining.remove(&victim);

        let mut subsets_ok = Vec::new();
        for drop in &rep.nonsaturated {
            let mut sub = rep.nonsaturated.clone();
            sub.remove(drop);
            subsets_ok.push((sub.clone(), projected_spare_ok(&snaps, &sub, &p)));
        }
        let found = subsets_ok
            .iter()
            .find(|(sub, _)| *sub == remaining)
            .expect("reduced set must be one of the (n-1)-subsets");
        assert_eq!(found.1, scaledown_guard_ok(&rep, &snaps, &p));
    }

    #[test]
    fn monotone_in_load() {
        let v = variant();
        let mut last = 0;
        for occupied in (0..100_000).step_by(4096) {
            let t = closed_form_target(occupied, 0, &v);
            assert!(t >= last);
            last = t;
        }
        let mut last = 0;
        for queued in 0..50 {
            let t = closed_form_target(0, queued, &v);
            assert!(t >= last);
            last = t;
        }
    }

    #[test]
    fn below_tau_with_margin_never_scales_up() {
        let snaps = vec![snap("r1", 0.3, 0), snap("r2", 0.4, 1)];
        let p = params();
        let rep = compute_saturation("a100", &snaps, &p);
        let rec = compute_target_replicas(&rep, &snaps, &p, &variant());
        assert_ne!(rec.direction, Direction::Up);
    }

    #[test]
    fn safety_net_floors_at_one() {
        let last = TargetState {
            model_id: "m".to_string(),
            per_variant_desired: BTreeMap::from([("a100".to_string(), 0)]),
            metrics_available: true,
            computed_at: 0.0,
            reason: "x".to_string(),
        };
        let out = safety_net(&last, false, 10.0);
        assert_eq!(out.per_variant_desired["a100"], 1);
        assert_eq!(out.reason, "safety-net");

        let last3 = TargetState {
            per_variant_desired: BTreeMap::from([("a100".to_string(), 3)]),
            ..last.clone()
        };
        assert_eq!(safety_net(&last3, false, 10.0).per_variant_desired["a100"], 3);
        // Gate open: pass-through.
        assert_eq!(safety_net(&last3, true, 10.0), last3);
    }
}
