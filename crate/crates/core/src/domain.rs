//! Shared vocabulary types and validated scenario configuration.
//!
//! Everything downstream (workload generation, the cluster simulator, the
//! control plane) operates on the types defined here. A [`ScenarioConfig`]
//! is immutable once validated and safe to share read-only.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::workload::TrafficProgram;

/// Replica role tag. Prefill/decode disaggregation is modeled only as a
/// per-variant label with its own policy parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReplicaRole {
    #[default]
    Unified,
    Prefill,
    Decode,
}

/// Saturation-policy parameters for one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaturationParams {
    /// KV usage saturation threshold (fraction of capacity).
    pub tau_kv: f64,
    /// Queue depth saturation threshold (requests).
    pub tau_q: u64,
    /// Minimum acceptable average spare KV headroom below tau_kv.
    pub gamma_kv: f64,
    /// Minimum acceptable average spare queue headroom below tau_q (requests).
    pub gamma_q: f64,
    /// Scale-down is refused unless strictly more than this many
    /// non-saturated replicas remain.
    pub min_nonsaturated_for_scaledown: u64,
    pub min_replicas: u32,
    pub max_replicas: u32,
}

impl Default for SaturationParams {
    fn default() -> Self {
        Self {
            tau_kv: 0.8,
            tau_q: 5,
            gamma_kv: 0.3,
            gamma_q: 2.0,
            min_nonsaturated_for_scaledown: 2,
            min_replicas: 0,
            max_replicas: 10,
        }
    }
}

/// A deployable model variant: hardware class plus parallelism, with its
/// cost, performance profile and policy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant_id: String,
    /// Groups variants into one pool for capacity planning.
    pub model_id: String,
    pub hardware_class: String,
    /// Free-text quantization label; carried but has no semantic effect.
    #[serde(default)]
    pub quantization: Option<String>,
    pub gpus_per_replica: u32,
    /// Relative cost per replica.
    pub variant_cost: f64,
    pub kv_capacity_tokens: u64,
    pub max_concurrent_sequences: u32,
    /// Prefill throughput, tokens/second.
    pub prefill_rate: f64,
    /// Decode throughput, tokens/second.
    pub decode_rate: f64,
    #[serde(default)]
    pub role: ReplicaRole,
    #[serde(default)]
    pub policy_params: SaturationParams,
}

/// One generated request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub request_id: u64,
    pub arrival_time: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    /// Affinity key for the prefix-cache scorer approximation.
    #[serde(default)]
    pub prefix_key: Option<String>,
}

impl RequestSpec {
    /// Total KV footprint reserved for this request while it is in flight.
    pub fn kv_footprint(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

/// Per-replica observed metrics at one control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub replica_id: String,
    pub variant_id: String,
    pub tick_time: f64,
    /// Occupied tokens / kv_capacity_tokens, in [0, 1].
    pub kv_usage: f64,
    pub queue_depth: u64,
    pub in_flight: u64,
    pub stale: bool,
}

/// An optimization decision: the DecisionCache entry for one model pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub model_id: String,
    pub per_variant_desired: BTreeMap<String, u32>,
    pub metrics_available: bool,
    pub computed_at: f64,
    pub reason: String,
}

/// HPA baseline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HpaParams {
    pub target_avg_queue: f64,
    pub target_avg_kv: f64,
    pub stabilization_window: f64,
    pub tolerance: f64,
}

impl Default for HpaParams {
    fn default() -> Self {
        Self {
            target_avg_queue: 3.0,
            target_avg_kv: 0.5,
            stabilization_window: 300.0,
            tolerance: 0.1,
        }
    }
}

/// Which control plane drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    #[default]
    Wva,
    Hpa,
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Wva => write!(f, "wva"),
            Baseline::Hpa => write!(f, "hpa"),
        }
    }
}

/// A metrics-outage window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
    /// "all" or "variant:<id>".
    pub scope: String,
}

/// Fault injection program: metric outages and scale-target deletions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultProgram {
    pub outages: Vec<Outage>,
    /// (time, variant_id): from `time` on, the variant's scale target is gone
    /// and its TargetResolved gate fails.
    pub target_deletions: Vec<(f64, String)>,
}

impl FaultProgram {
    pub fn is_empty(&self) -> bool {
        self.outages.is_empty() && self.target_deletions.is_empty()
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub variants: Vec<VariantSpec>,
    /// Absent means unconstrained mode.
    #[serde(default)]
    pub cluster_gpu_budget: Option<u64>,
    pub traffic_program: TrafficProgram,
    pub duration: f64,
    pub control_interval: f64,
    pub scale_from_zero_interval: f64,
    pub provisioning_delay: f64,
    /// Seconds a draining replica is given before forced termination.
    /// `inf` means wait forever.
    pub drain_grace: f64,
    pub rng_seed: u64,
    /// Scorer name -> weight. Known scorers: "queue", "kv", "prefix".
    #[serde(default = "default_scheduler_weights")]
    pub scheduler_weights: BTreeMap<String, f64>,
    pub hard_queue_cap: u64,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub hpa_params: HpaParams,
    #[serde(default)]
    pub faults: FaultProgram,
}

fn default_scheduler_weights() -> BTreeMap<String, f64> {
    let mut w = BTreeMap::new();
    w.insert("queue".to_string(), 1.0);
    w.insert("kv".to_string(), 1.0);
    w.insert("prefix".to_string(), 0.0);
    w
}

impl ScenarioConfig {
    pub fn variant(&self, variant_id: &str) -> Option<&VariantSpec> {
        self.variants.iter().find(|v| v.variant_id == variant_id)
    }

    /// Variants of one model pool, ascending by (variant_cost, variant_id).
    pub fn pool_variants(&self, model_id: &str) -> Vec<&VariantSpec> {
        let mut vs: Vec<&VariantSpec> = self
            .variants
            .iter()
            .filter(|v| v.model_id == model_id)
            .collect();
        vs.sort_by(|a, b| {
            a.variant_cost
                .total_cmp(&b.variant_cost)
                .then_with(|| a.variant_id.cmp(&b.variant_id))
        });
        vs
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.variants.iter().map(|v| v.model_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// One invariant violation found by [`validate_scenario`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Error kind, e.g. "invalid-field", "duplicate-variant-id".
    pub kind: String,
    /// Field path, e.g. "variants[0].gamma_kv".
    pub path: String,
    pub message: String,
}

/// Validation error report listing every violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario validation failed:")?;
        for v in &self.violations {
            writeln!(f, "  [{}] {}: {}", v.kind, v.path, v.message)?;
        }
        Ok(())
    }
}

/// Checks every type invariant and returns the config unchanged when all
/// hold, otherwise a report with one entry per violation.
pub fn validate_scenario(cfg: ScenarioConfig) -> Result<ScenarioConfig, ValidationReport> {
    let mut violations = Vec::new();
    let mut bad = |kind: &str, path: String, message: String| {
        violations.push(Violation {
            kind: kind.to_string(),
            path,
            message,
        });
    };

    if cfg.duration <= 0.0 {
        bad(
            "invalid-field",
            "duration".into(),
            "duration must be > 0".into(),
        );
    }
    if cfg.control_interval <= 0.0 {
        bad(
            "invalid-field",
            "control_interval".into(),
            "control_interval must be > 0".into(),
        );
    }
    if cfg.scale_from_zero_interval <= 0.0 {
        bad(
            "invalid-field",
            "scale_from_zero_interval".into(),
            "scale_from_zero_interval must be > 0".into(),
        );
    }
    if cfg.scale_from_zero_interval > cfg.control_interval {
        bad(
            "invalid-field",
            "scale_from_zero_interval".into(),
            "scale_from_zero_interval must be <= control_interval".into(),
        );
    }
    if cfg.hard_queue_cap == 0 {
        bad(
            "invalid-field",
            "hard_queue_cap".into(),
            "hard_queue_cap must be >= 1".into(),
        );
    }
    if cfg.provisioning_delay < 0.0 {
        bad(
            "invalid-field",
            "provisioning_delay".into(),
            "provisioning_delay must be >= 0".into(),
        );
    }
    if cfg.drain_grace < 0.0 {
        bad(
            "invalid-field",
            "drain_grace".into(),
            "drain_grace must be >= 0".into(),
        );
    }
    if let Some(b) = cfg.cluster_gpu_budget {
        if b == 0 {
            bad(
                "invalid-field",
                "cluster_gpu_budget".into(),
                "budget must be >= 1 when present".into(),
            );
        }
    }
    if cfg.hpa_params.target_avg_queue <= 0.0 {
        bad(
            "invalid-field",
            "hpa_params.target_avg_queue".into(),
            "must be > 0".into(),
        );
    }
    if cfg.hpa_params.target_avg_kv <= 0.0 || cfg.hpa_params.target_avg_kv >= 1.0 {
        bad(
            "invalid-field",
            "hpa_params.target_avg_kv".into(),
            "must be in (0, 1)".into(),
        );
    }
    for (i, o) in cfg.faults.outages.iter().enumerate() {
        if o.start >= o.end {
            bad(
                "invalid-field",
                format!("faults.outages[{i}]"),
                "outage start must be < end".into(),
            );
        }
    }

    let mut seen = std::collections::HashSet::new();
    for (i, v) in cfg.variants.iter().enumerate() {
        let path = |f: &str| format!("variants[{i}].{f}");
        if !seen.insert((v.model_id.clone(), v.variant_id.clone())) {
            bad(
                "duplicate-variant-id",
                path("variant_id"),
                format!("duplicate (model_id, variant_id) ({}, {})", v.model_id, v.variant_id),
            );
        }
        if v.gpus_per_replica < 1 {
            bad("invalid-field", path("gpus_per_replica"), "must be >= 1".into());
        }
        if v.variant_cost <= 0.0 {
            bad("invalid-field", path("variant_cost"), "must be > 0".into());
        }
        if v.kv_capacity_tokens < 1 {
            bad("invalid-field", path("kv_capacity_tokens"), "must be >= 1".into());
        }
        if v.max_concurrent_sequences < 1 {
            bad(
                "invalid-field",
                path("max_concurrent_sequences"),
                "must be >= 1".into(),
            );
        }
        if v.prefill_rate <= 0.0 {
            bad("invalid-field", path("prefill_rate"), "must be > 0".into());
        }
        if v.decode_rate <= 0.0 {
            bad("invalid-field", path("decode_rate"), "must be > 0".into());
        }
        let p = &v.policy_params;
        if !(p.tau_kv > 0.0 && p.tau_kv <= 1.0) {
            bad(
                "invalid-field",
                path("policy_params.tau_kv"),
                "must be in (0, 1]".into(),
            );
        }
        if p.tau_q < 1 {
            bad("invalid-field", path("policy_params.tau_q"), "must be >= 1".into());
        }
        if !(p.gamma_kv > 0.0 && p.gamma_kv < 1.0) {
            bad(
                "invalid-field",
                path("policy_params.gamma_kv"),
                "must be in (0, 1)".into(),
            );
        }
        if p.gamma_q < 0.0 {
            bad("invalid-field", path("policy_params.gamma_q"), "must be >= 0".into());
        }
        if p.gamma_kv >= p.tau_kv {
            bad(
                "gamma-not-below-tau",
                path("policy_params.gamma_kv"),
                format!(
                    "gamma_kv {} must be < tau_kv {} or the headroom trigger can never hold",
                    p.gamma_kv, p.tau_kv
                ),
            );
        }
        if p.min_replicas > p.max_replicas {
            bad(
                "invalid-field",
                path("policy_params.min_replicas"),
                "min_replicas must be <= max_replicas".into(),
            );
        }
        if p.max_replicas < 1 {
            bad(
                "invalid-field",
                path("policy_params.max_replicas"),
                "must be >= 1".into(),
            );
        }
    }
    if cfg.variants.is_empty() {
        bad("invalid-field", "variants".into(), "at least one variant required".into());
    }

    if let Err(e) = cfg.traffic_program.check() {
        bad("invalid-field", format!("traffic_program.{}", e.0), e.1);
    }

    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ValidationReport { violations })
    }
}

/// Parse a scenario file (TOML) and validate it.
pub fn load_scenario(path: &std::path::Path) -> Result<ScenarioConfig, ScenarioLoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioLoadError::Io(path.display().to_string(), e))?;
    let cfg: ScenarioConfig = toml::from_str(&text).map_err(ScenarioLoadError::Parse)?;
    validate_scenario(cfg).map_err(ScenarioLoadError::Invalid)
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioLoadError {
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(#[from] ValidationReport),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{BoundedNormal, TrafficProgram};

    pub(crate) fn test_variant(id: &str) -> VariantSpec {
        VariantSpec {
            variant_id: id.to_string(),
            model_id: "llama3-70b".to_string(),
            hardware_class: "A100".to_string(),
            quantization: None,
            gpus_per_replica: 1,
            variant_cost: 1.0,
            kv_capacity_tokens: 16384,
            max_concurrent_sequences: 256,
            prefill_rate: 8192.0,
            decode_rate: 1024.0,
            role: ReplicaRole::Unified,
            policy_params: SaturationParams::default(),
        }
    }

    pub(crate) fn test_config() -> ScenarioConfig {
        ScenarioConfig {
            variants: vec![test_variant("a100")],
            cluster_gpu_budget: None,
            traffic_program: TrafficProgram {
                phases: vec![(0.0, 2.0)],
                arrival_process: crate::workload::ArrivalProcess::DeterministicUniform,
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
            provisioning_delay: 10.0,
            drain_grace: f64::INFINITY,
            rng_seed: 42,
            scheduler_weights: super::default_scheduler_weights(),
            hard_queue_cap: 10,
            baseline: Baseline::Wva,
            hpa_params: HpaParams::default(),
            faults: FaultProgram::default(),
        }
    }

    #[test]
    fn paper_defaults_validate() {
        // gamma_kv=0.3 below tau_kv=0.8 is the configuration from the evaluation.
        let cfg = test_config();
        assert!(validate_scenario(cfg).is_ok());
    }

    #[test]
    fn gamma_not_below_tau_rejected() {
        let mut cfg = test_config();
        cfg.variants[0].policy_params.gamma_kv = 0.9;
        let err = validate_scenario(cfg).unwrap_err();
        assert!(err.violations.iter().any(|v| v.kind == "gamma-not-below-tau"));
    }

    #[test]
    fn duplicate_variant_id_rejected() {
        let mut cfg = test_config();
        cfg.variants.push(test_variant("a100"));
        let err = validate_scenario(cfg).unwrap_err();
        assert!(err.violations.iter().any(|v| v.kind == "duplicate-variant-id"));
    }

    #[test]
    fn report_lists_every_violation() {
        let mut cfg = test_config();
        cfg.variants[0].variant_cost = -1.0;
        cfg.variants[0].policy_params.gamma_kv = 0.9;
        cfg.duration = 0.0;
        let err = validate_scenario(cfg).unwrap_err();
        assert!(err.violations.len() >= 3);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = test_config();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ScenarioConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn validate_is_pure() {
        let mut cfg = test_config();
        cfg.variants[0].policy_params.gamma_kv = 0.9;
        let a = validate_scenario(cfg.clone()).unwrap_err();
        let b = validate_scenario(cfg).unwrap_err();
        assert_eq!(a, b);
    }
}
