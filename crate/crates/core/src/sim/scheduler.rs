//! Endpoint-picker scoring: routes each arrival to the least saturated
//! ready replica using weighted queue, KV-usage, and prefix-affinity scores.

use crate::domain::RequestSpec;
use crate::sim::outcome::DropCause;

/// The scheduler's view of one ready replica.
#[derive(Debug, Clone)]
pub struct ReplicaView {
    pub replica_id: String,
    pub queue_depth: u64,
    pub kv_usage: f64,
    /// capacity - occupied tokens.
    pub free_tokens: u64,
    /// True when this replica served the most recent request with the same
    /// prefix key.
    pub affinity: bool,
}

/// Scorer weights; missing scorers default to 0.
#[derive(Debug, Clone, Copy)]
pub struct ScorerWeights {
    pub queue: f64,
    pub kv: f64,
    pub prefix: f64,
}

impl ScorerWeights {
    pub fn from_map(m: &std::collections::BTreeMap<String, f64>) -> Self {
        Self {
            queue: m.get("queue").copied().unwrap_or(0.0),
            kv: m.get("kv").copied().unwrap_or(0.0),
            prefix: m.get("prefix").copied().unwrap_or(0.0),
        }
    }
}

/// Picks the max-score ready replica for a request, or rejects.
///
/// Score per replica:
/// `w_q * (1 - min(queue/hard_cap, 1)) + w_kv * (1 - kv_usage) + w_pfx * affinity`.
/// Ties break to the lowest replica id. Rejection causes: no ready replica,
/// the chosen replica's queue is at the hard cap, or no ready replica has
/// `input_tokens` of free KV space.
pub fn schedule_request(
    req: &RequestSpec,
    ready: &[ReplicaView],
    weights: ScorerWeights,
    hard_queue_cap: u64,
) -> Result<String, DropCause> {
    if ready.is_empty() {
        return Err(DropCause::NoReadyReplica);
    }

    let score = |r: &ReplicaView| -> f64 {
        let q_frac = (r.queue_depth as f64 / hard_queue_cap as f64).min(1.0);
        weights.queue * (1.0 - q_frac)
            + weights.kv * (1.0 - r.kv_usage)
            + weights.prefix * if r.affinity { 1.0 } else { 0.0 }
    };

    let chosen = ready
        .iter()
        .max_by(|a, b| {
            score(a)
                .total_cmp(&score(b))
                // max_by returns the last max; invert the id order so the
                // lowest replica_id wins ties.
                .then_with(|| b.replica_id.cmp(&a.replica_id))
        })
        .expect("non-empty");

    if chosen.queue_depth >= hard_queue_cap {
        return Err(DropCause::QueueFull);
    }
    // Saturation rejection: every ready replica is KV-exhausted AND already
    // has backlog waiting for that KV. With an empty queue somewhere the
    // request waits there instead, consuming KV as it frees up.
    if ready
        .iter()
        .all(|r| r.free_tokens < req.input_tokens && r.queue_depth > 0)
    {
        return Err(DropCause::KvFull);
    }
    Ok(chosen.replica_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(input: u64) -> RequestSpec {
        RequestSpec {
            request_id: 0,
            arrival_time: 0.0,
            input_tokens: input,
            output_tokens: 100,
            prefix_key: None,
        }
    }

    fn view(id: &str, queue: u64, kv: f64, free: u64) -> ReplicaView {
        ReplicaView {
            replica_id: id.to_string(),
            queue_depth: queue,
            kv_usage: kv,
            free_tokens: free,
            affinity: false,
        }
    }

    const W: ScorerWeights = ScorerWeights {
        queue: 1.0,
        kv: 1.0,
        prefix: 0.0,
    };

    #[test]
    fn lower_kv_usage_wins_with_equal_queues() {
        let ready = vec![view("r0", 2, 0.9, 2000), view("r1", 2, 0.1, 15000)];
        assert_eq!(schedule_request(&req(100), &ready, W, 10).unwrap(), "r1");
    }

    #[test]
    fn empty_set_rejects() {
        assert_eq!(
            schedule_request(&req(100), &[], W, 10).unwrap_err(),
            DropCause::NoReadyReplica
        );
    }

    #[test]
    fn chosen_at_hard_cap_rejects_queue_full() {
        let ready = vec![view("r0", 10, 0.0, 16000), view("r1", 10, 0.5, 16000)];
        assert_eq!(
            schedule_request(&req(100), &ready, W, 10).unwrap_err(),
            DropCause::QueueFull
        );
    }

    #[test]
    fn all_kv_exhausted_rejects_kv_full() {
        let ready = vec![view("r0", 2, 0.99, 50), view("r1", 1, 0.99, 90)];
        assert_eq!(
            schedule_request(&req(100), &ready, W, 10).unwrap_err(),
            DropCause::KvFull
        );
    }

    #[test]
    fn ties_break_to_lowest_replica_id() {
        let ready = vec![view("r2", 1, 0.5, 8000), view("r1", 1, 0.5, 8000)];
        assert_eq!(schedule_request(&req(100), &ready, W, 10).unwrap(), "r1");
    }

    #[test]
    fn affinity_bonus_steers_with_prefix_weight() {
        let w = ScorerWeights {
            queue: 1.0,
            kv: 1.0,
            prefix: 3.0,
        };
        let mut ready = vec![view("r0", 0, 0.1, 15000), view("r1", 0, 0.6, 7000)];
        ready[1].affinity = true;
        assert_eq!(schedule_request(&req(100), &ready, w, 10).unwrap(), "r1");
    }
}
