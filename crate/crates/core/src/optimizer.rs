//! Global arbitration of per-variant scale requests: pass-through in
//! unconstrained mode, greedy-by-saturation allocation under a finite GPU
//! budget in constrained mode.
//!
//! Priority order for scale-up grants: ascending spare capacity (closest
//! to saturation first), then ascending variant cost, then variant id for
//! total determinism.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One variant's resource request into the arbiter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRequest {
    pub variant_id: String,
    pub model_id: String,
    pub current_replicas: u32,
    pub desired_replicas: u32,
    pub gpus_per_replica: u32,
    pub variant_cost: f64,
    /// Normalized remaining headroom (the priority key).
    pub spare_capacity: f64,
}

/// The arbiter's decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub per_variant_granted: BTreeMap<String, u32>,
    pub gpus_used: u64,
    pub gpus_budget: Option<u64>,
    /// Scale-up replicas denied per variant (only non-zero entries).
    pub unmet: BTreeMap<String, u32>,
    /// Set when even the retained base capacity did not fit the budget.
    pub infeasible_base: bool,
}

/// Grants every request in full; no budget accounting.
pub fn optimize_unconstrained(requests: &[AllocationRequest]) -> AllocationResult {
    AllocationResult {
        per_variant_granted: requests
            .iter()
            .map(|r| (r.variant_id.clone(), r.desired_replicas))
            .collect(),
        gpus_used: requests
            .iter()
            .map(|r| r.desired_replicas as u64 * r.gpus_per_replica as u64)
            .sum(),
        gpus_budget: None,
        unmet: BTreeMap::new(),
        infeasible_base: false,
    }
}

fn priority_order(requests: &[AllocationRequest]) -> Vec<&AllocationRequest> {
    let mut order: Vec<&AllocationRequest> = requests.iter().collect();
    order.sort_by(|a, b| {
        a.spare_capacity
            .total_cmp(&b.spare_capacity)
            .then_with(|| a.variant_cost.total_cmp(&b.variant_cost))
            .then_with(|| a.variant_id.cmp(&b.variant_id))
    });
    order
}

/// Greedy-by-saturation allocation under `budget_gpus`.
///
/// Retained capacity (`min(current, desired)`) is charged to the budget
/// first; scale-downs are always granted in full. Scale-up deltas are then
/// granted replica-by-replica in priority order; a replica that does not
/// fit the residual budget is skipped and the scan continues.
pub fn optimize_constrained(requests: &[AllocationRequest], budget_gpus: u64) -> AllocationResult {
    let order = priority_order(requests);

    let mut granted: BTreeMap<String, u32> = BTreeMap::new();
    let mut used: u64 = 0;
    let mut infeasible_base = false;

    // Base charge in the same priority order, truncating if it alone
    // exceeds the budget.
    for r in &order {
        let base = r.current_replicas.min(r.desired_replicas);
        let cost = base as u64 * r.gpus_per_replica as u64;
        if used + cost <= budget_gpus {
            granted.insert(r.variant_id.clone(), base);
            used += cost;
        } else {
            let fit = ((budget_gpus - used) / r.gpus_per_replica as u64) as u32;
            let kept = fit.min(base);
            granted.insert(r.variant_id.clone(), kept);
            used += kept as u64 * r.gpus_per_replica as u64;
            infeasible_base = true;
        }
    }

    // Scale-up deltas replica-by-replica; skip-and-continue on misfit.
    let mut unmet: BTreeMap<String, u32> = BTreeMap::new();
    for r in &order {
        if r.desired_replicas <= r.current_replicas {
            continue;
        }
        let delta = r.desired_replicas - r.current_replicas;
        for _ in 0..delta {
            let cost = r.gpus_per_replica as u64;
            if !infeasible_base && used + cost <= budget_gpus {
                *granted.get_mut(&r.variant_id).unwrap() += 1;
                used += cost;
            } else {
                *unmet.entry(r.variant_id.clone()).or_insert(0) += 1;
            }
        }
    }

    AllocationResult {
        per_variant_granted: granted,
        gpus_used: used,
        gpus_budget: Some(budget_gpus),
        unmet,
        infeasible_base,
    }
}
