//! Closed-loop scenario runner: wires the workload generator, cluster
//! simulator, and control plane together on a tick grid, then writes the
//! run artifacts (time series, decision trace, commands, event log,
//! summary) and builds comparison/plot tables from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::{ActuationCommand, ControlPlane, OptimizerMode};
use crate::domain::{Baseline, ScenarioConfig};
use crate::sim::{SimOutcome, Simulator};
use crate::workload::generate_arrivals;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scale target: {0}")]
    InvalidTarget(#[from] crate::sim::InvalidTarget),
    #[error("cannot compare runs: {0}")]
    MismatchedTraffic(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
}

/// Aggregates for one traffic phase, split by request arrival time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub start: f64,
    pub end: f64,
    pub rps_target: f64,
    pub arrived: u64,
    pub completed: u64,
    pub throughput_completed_rps: f64,
    pub drops: u64,
    pub drops_per_s: f64,
    pub drop_causes: BTreeMap<String, u64>,
    pub mean_ttft: Option<f64>,
    pub mean_itl: Option<f64>,
    /// Time-averaged active replicas across all variants during the phase.
    pub mean_replicas: f64,
    /// True when any variant touched its replica cap during the phase.
    pub max_replicas_hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub arrived: u64,
    pub completed: u64,
    pub dropped: u64,
    pub drop_causes: BTreeMap<String, u64>,
    pub queued_at_end: u64,
    pub in_flight_at_end: u64,
    pub mean_ttft: Option<f64>,
    pub mean_itl: Option<f64>,
    pub mean_replicas: f64,
    pub max_replicas_observed: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub baseline: Baseline,
    pub seed: u64,
    pub config_digest: String,
    pub duration: f64,
    pub phases: Vec<PhaseSummary>,
    pub totals: RunTotals,
    pub event_log_sha256: String,
    pub commands_emitted: u64,
}

/// One row of the per-variant time series, sampled on the fast tick grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesRow {
    pub tick: f64,
    pub variant_id: String,
    pub replicas_ready: u32,
    pub replicas_active: u32,
    pub avg_kv: f64,
    pub avg_queue: f64,
    /// Pool-wide arrival rate over the sample window (repeated per variant).
    pub rps_in: f64,
    /// Pool-wide completion rate over the sample window.
    pub rps_out: f64,
    /// Pool-wide drop rate over the sample window.
    pub drops_per_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest recorded in the summary: the scenario file bytes when the run
/// came from a file, else the canonical serialized form of the config.
pub fn config_digest(cfg: &ScenarioConfig, source: Option<&[u8]>) -> String {
    match source {
        Some(bytes) => sha256_hex(bytes),
        None => sha256_hex(toml::to_string(cfg).expect("config serializes").as_bytes()),
    }
}

fn tick_grid(duration: f64, fast: f64, slow: f64) -> Vec<f64> {
    let mut ticks = Vec::new();
    let mut push = |t: f64| {
        if t <= duration + 1e-9 {
            ticks.push(t);
        }
    };
    let mut k = 0u64;
    loop {
        let t = k as f64 * fast;
        if t > duration + 1e-9 {
            break;
        }
        push(t);
        k += 1;
    }
    let mut k = 0u64;
    loop {
        let t = k as f64 * slow;
        if t > duration + 1e-9 {
            break;
        }
        push(t);
        k += 1;
    }
    ticks.sort_by(f64::total_cmp);
    ticks.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    ticks
}

fn is_multiple(t: f64, interval: f64) -> bool {
    let k = (t / interval).round();
    (t - k * interval).abs() < 1e-9
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0u64);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Everything a run leaves behind, in memory. [`write_artifacts`] persists
/// it to a directory.
pub struct RunResult {
    pub summary: RunSummary,
    pub outcome: SimOutcome,
    pub series: Vec<SeriesRow>,
    pub trace: Vec<crate::control::TraceRow>,
    pub commands: Vec<ActuationCommand>,
    pub event_log_lines: Vec<String>,
    pub targets: Vec<crate::domain::TargetState>,
    /// Snapshots as consumed by the optimizer, one batch per control tick.
    pub snapshots: Vec<crate::domain::MetricSnapshot>,
}

/// Runs one scenario end to end. `source` is the raw scenario file when
/// available (it feeds the tamper-evidence digest).
pub fn run_scenario(
    cfg: &ScenarioConfig,
    mode: OptimizerMode,
    source: Option<&[u8]>,
) -> Result<RunResult, RunError> {
    let arrivals = generate_arrivals(&cfg.traffic_program, cfg.duration, cfg.rng_seed);
    let mut sim = Simulator::new(cfg);
    sim.inject_arrivals(&arrivals);

    let budget = cfg.cluster_gpu_budget;
    let mode = match (mode, budget) {
        (OptimizerMode::Constrained, Some(_)) => OptimizerMode::Constrained,
        _ => OptimizerMode::Unconstrained,
    };
    let mut cp = ControlPlane::new(cfg, mode, budget);

    // Start every variant warm at its floor so both policies begin from
    // the same running deployment (the HPA rule cannot scale a pool up
    // from zero; cold starts are the scale-from-zero path's job).
    for v in &cfg.variants {
        if v.policy_params.min_replicas > 0 {
            sim.prewarm(&v.variant_id, v.policy_params.min_replicas);
        }
    }

    let grid = tick_grid(cfg.duration, cfg.scale_from_zero_interval, cfg.control_interval);
    let mut series = Vec::new();
    let mut all_commands: Vec<ActuationCommand> = Vec::new();

    let mut last_sample_t = 0.0;
    let mut last_arrived = 0u64;
    let mut last_completed = 0u64;
    let mut last_dropped = 0u64;
    // (time, total active replicas) samples for time-averaged replica counts.
    let mut replica_samples: Vec<(f64, u32, bool)> = Vec::new();

    for &t in &grid {
        sim.advance(t);

        let commands = match cfg.baseline {
            Baseline::Wva => {
                let mut cmds = cp.scale_from_zero_tick(t, &sim);
                if is_multiple(t, cfg.control_interval) {
                    cmds.extend(cp.control_tick(t, &sim));
                }
                cmds
            }
            Baseline::Hpa => {
                if is_multiple(t, cfg.control_interval) {
                    cp.hpa_tick(t, &sim, &cfg.hpa_params)
                } else {
                    Vec::new()
                }
            }
        };
        for cmd in &commands {
            sim.apply_replica_target(&cmd.variant_id, cmd.target_replicas, cmd.drain_safe)?;
        }
        all_commands.extend(commands);

        // Sample the time series after actuation.
        let outcome = sim.outcome();
        let dt = (t - last_sample_t).max(1e-9);
        let rps_in = (outcome.arrived - last_arrived) as f64 / dt;
        let rps_out = (outcome.completed - last_completed) as f64 / dt;
        let drop_rate = (outcome.dropped - last_dropped) as f64 / dt;
        last_arrived = outcome.arrived;
        last_completed = outcome.completed;
        last_dropped = outcome.dropped;
        last_sample_t = t;

        let snaps = sim.snapshot_metrics();
        let mut total_active = 0u32;
        let mut any_capped = false;
        for v in &cfg.variants {
            let counts = sim.replica_counts(&v.variant_id);
            total_active += counts.active();
            any_capped |= counts.active() >= v.policy_params.max_replicas
                && v.policy_params.max_replicas > v.policy_params.min_replicas;
            let vs: Vec<_> = snaps.iter().filter(|s| s.variant_id == v.variant_id).collect();
            let n = vs.len().max(1) as f64;
            series.push(SeriesRow {
                tick: t,
                variant_id: v.variant_id.clone(),
                replicas_ready: counts.ready,
                replicas_active: counts.active(),
                avg_kv: vs.iter().map(|s| s.kv_usage).sum::<f64>() / n,
                avg_queue: vs.iter().map(|s| s.queue_depth as f64).sum::<f64>() / n,
                rps_in,
                rps_out,
                drops_per_s: drop_rate,
            });
        }
        replica_samples.push((t, total_active, any_capped));
        sim.check_invariants();
    }
    sim.advance(cfg.duration);

    let outcome = sim.outcome();
    let summary = summarize(cfg, &outcome, &replica_samples, &sim, cp.commands_emitted, source);
    Ok(RunResult {
        summary,
        outcome,
        series,
        trace: std::mem::take(&mut cp.trace),
        commands: all_commands,
        event_log_lines: sim.event_log().lines().to_vec(),
        targets: std::mem::take(&mut cp.targets_log),
        snapshots: std::mem::take(&mut cp.snapshots_log),
    })
}

fn summarize(
    cfg: &ScenarioConfig,
    outcome: &SimOutcome,
    replica_samples: &[(f64, u32, bool)],
    sim: &Simulator,
    commands_emitted: u64,
    source: Option<&[u8]>,
) -> RunSummary {
    let phases = &cfg.traffic_program.phases;
    let mut phase_rows = Vec::new();
    for (i, &(start, rps)) in phases.iter().enumerate() {
        let end = phases.get(i + 1).map(|&(s, _)| s).unwrap_or(cfg.duration);
        let span = (end - start).max(1e-9);
        let in_phase: Vec<_> = outcome
            .records
            .iter()
            .filter(|r| r.arrival_time >= start && r.arrival_time < end)
            .collect();
        let arrived = in_phase.len() as u64;
        let completed = in_phase.iter().filter(|r| r.completed_at.is_some()).count() as u64;
        let mut drop_causes = BTreeMap::new();
        for r in &in_phase {
            if let Some(cause) = r.dropped {
                *drop_causes.entry(cause.to_string()).or_insert(0u64) += 1;
            }
        }
        let drops: u64 = drop_causes.values().sum();
        let window: Vec<_> = replica_samples
            .iter()
            .filter(|(t, _, _)| *t >= start && *t < end)
            .collect();
        phase_rows.push(PhaseSummary {
            start,
            end,
            rps_target: rps,
            arrived,
            completed,
            throughput_completed_rps: completed as f64 / span,
            drops,
            drops_per_s: drops as f64 / span,
            drop_causes,
            mean_ttft: mean(in_phase.iter().filter_map(|r| r.ttft())),
            mean_itl: mean(in_phase.iter().filter_map(|r| r.itl_mean())),
            mean_replicas: mean(window.iter().map(|(_, n, _)| *n as f64)).unwrap_or(0.0),
            max_replicas_hit: window.iter().any(|(_, _, capped)| *capped),
        });
    }

    let totals = RunTotals {
        arrived: outcome.arrived,
        completed: outcome.completed,
        dropped: outcome.dropped,
        drop_causes: outcome.drop_causes.clone(),
        queued_at_end: outcome.queued_at_end,
        in_flight_at_end: outcome.in_flight_at_end,
        mean_ttft: mean(outcome.records.iter().filter_map(|r| r.ttft())),
        mean_itl: mean(outcome.records.iter().filter_map(|r| r.itl_mean())),
        mean_replicas: mean(replica_samples.iter().map(|(_, n, _)| *n as f64)).unwrap_or(0.0),
        max_replicas_observed: replica_samples.iter().map(|(_, n, _)| *n).max().unwrap_or(0),
    };

    RunSummary {
        baseline: cfg.baseline,
        seed: cfg.rng_seed,
        config_digest: config_digest(cfg, source),
        duration: cfg.duration,
        phases: phase_rows,
        totals,
        event_log_sha256: sim.event_log().sha256_hex(),
        commands_emitted,
    }
}

/// Persists every artifact of a run into `out_dir`.
pub fn write_artifacts(result: &RunResult, out_dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out_dir)?;

    let mut w = csv::Writer::from_path(out_dir.join("timeseries.csv"))?;
    for row in &result.series {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("decision_trace.csv"))?;
    for row in &result.trace {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out_dir.join("commands.csv"))?;
    for cmd in &result.commands {
        w.serialize(cmd)?;
    }
    w.flush()?;

    crate::metrics_io::write_snapshot_csv(&out_dir.join("snapshots.csv"), &result.snapshots)?;

    fs::write(
        out_dir.join("events.log"),
        result.event_log_lines.join("\n") + "\n",
    )?;
    fs::write(
        out_dir.join("events.sha256"),
        &result.summary.event_log_sha256,
    )?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&result.summary)?,
    )?;
    Ok(())
}

/// Per-phase delta between two runs; percentages are (a - b) / b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub rps_target: f64,
    pub throughput_a: f64,
    pub throughput_b: f64,
    pub throughput_delta: f64,
    pub throughput_pct: Option<f64>,
    pub drops_a: u64,
    pub drops_b: u64,
    pub drop_ratio: Option<f64>,
    pub mean_ttft_a: Option<f64>,
    pub mean_ttft_b: Option<f64>,
    pub mean_replicas_a: f64,
    pub mean_replicas_b: f64,
}

/// Builds the per-phase comparison table; both runs must have been driven
/// by the same traffic (same seed, same phase plan).
pub fn compare_runs(a: &RunSummary, b: &RunSummary) -> Result<Vec<CompareRow>, RunError> {
    if a.seed != b.seed {
        return Err(RunError::MismatchedTraffic(format!(
            "seeds differ: {} vs {}",
            a.seed, b.seed
        )));
    }
    let plan = |s: &RunSummary| -> Vec<(f64, f64)> {
        s.phases.iter().map(|p| (p.start, p.rps_target)).collect()
    };
    if plan(a) != plan(b) {
        return Err(RunError::MismatchedTraffic(
            "traffic phase plans differ".to_string(),
        ));
    }

    Ok(a.phases
        .iter()
        .zip(&b.phases)
        .map(|(pa, pb)| CompareRow {
            rps_target: pa.rps_target,
            throughput_a: pa.throughput_completed_rps,
            throughput_b: pb.throughput_completed_rps,
            throughput_delta: pa.throughput_completed_rps - pb.throughput_completed_rps,
            throughput_pct: (pb.throughput_completed_rps > 0.0).then(|| {
                (pa.throughput_completed_rps - pb.throughput_completed_rps)
                    / pb.throughput_completed_rps
            }),
            drops_a: pa.drops,
            drops_b: pb.drops,
            drop_ratio: (pb.drops > 0).then(|| pa.drops as f64 / pb.drops as f64),
            mean_ttft_a: pa.mean_ttft,
            mean_ttft_b: pb.mean_ttft,
            mean_replicas_a: pa.mean_replicas,
            mean_replicas_b: pb.mean_replicas,
        })
        .collect())
}

pub fn load_summary(run_dir: &Path) -> Result<RunSummary, RunError> {
    let path = run_dir.join("summary.json");
    let bytes = fs::read(&path).map_err(|_| RunError::MissingArtifact(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Projects plot-ready tables out of a run directory. Returns warnings for
/// artifacts that were missing (emission degrades instead of failing).
pub fn emit_plot_data(run_dir: &Path, out_dir: &Path) -> Result<Vec<String>, RunError> {
    fs::create_dir_all(out_dir)?;
    let mut warnings = Vec::new();

    let ts_path = run_dir.join("timeseries.csv");
    if ts_path.exists() {
        let mut rdr = csv::Reader::from_path(&ts_path)?;
        let rows: Vec<SeriesRow> = rdr.deserialize().collect::<Result<_, _>>()?;

        // Reactivity: pool-level aligned series of traffic, replicas, kv.
        let mut w = csv::Writer::from_path(out_dir.join("reactivity.csv"))?;
        w.write_record(["time", "rps_in", "replicas_active", "avg_kv"])?;
        let mut by_tick: BTreeMap<u64, (f64, f64, u32, f64, usize)> = BTreeMap::new();
        for r in &rows {
            let key = (r.tick * 1000.0).round() as u64;
            let e = by_tick.entry(key).or_insert((r.tick, 0.0, 0, 0.0, 0));
            e.1 = r.rps_in;
            e.2 += r.replicas_active;
            e.3 += r.avg_kv * r.replicas_active.max(1) as f64;
            e.4 += r.replicas_active.max(1) as usize;
        }
        for (_, (t, rps, reps, kv_sum, n)) in &by_tick {
            w.write_record([
                format!("{t}"),
                format!("{rps}"),
                format!("{reps}"),
                format!("{}", kv_sum / *n as f64),
            ])?;
        }
        w.flush()?;

        // Cost tiering: one replica-count column per variant.
        let mut variants: Vec<String> = rows.iter().map(|r| r.variant_id.clone()).collect();
        variants.sort();
        variants.dedup();
        let mut w = csv::Writer::from_path(out_dir.join("cost_tiering.csv"))?;
        let mut header = vec!["time".to_string()];
        header.extend(variants.iter().map(|v| format!("replicas_{v}")));
        w.write_record(&header)?;
        let mut per_tick: BTreeMap<u64, (f64, BTreeMap<String, u32>)> = BTreeMap::new();
        for r in &rows {
            let key = (r.tick * 1000.0).round() as u64;
            let e = per_tick.entry(key).or_insert((r.tick, BTreeMap::new()));
            e.1.insert(r.variant_id.clone(), r.replicas_active);
        }
        for (_, (t, counts)) in &per_tick {
            let mut rec = vec![format!("{t}")];
            rec.extend(
                variants
                    .iter()
                    .map(|v| format!("{}", counts.get(v).copied().unwrap_or(0))),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
    } else {
        warnings.push("timeseries.csv missing; skipped reactivity and cost-tiering tables".into());
    }

    match load_summary(run_dir) {
        Ok(summary) => {
            let mut w = csv::Writer::from_path(out_dir.join("throughput_vs_rps.csv"))?;
            w.write_record(["rps_target", "throughput_completed_rps"])?;
            for p in &summary.phases {
                w.write_record([format!("{}", p.rps_target), format!("{}", p.throughput_completed_rps)])?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_path(out_dir.join("drops_vs_rps.csv"))?;
            w.write_record(["rps_target", "drops_per_s"])?;
            for p in &summary.phases {
                w.write_record([format!("{}", p.rps_target), format!("{}", p.drops_per_s)])?;
            }
            w.flush()?;

            let mut w = csv::Writer::from_path(out_dir.join("latency_vs_rps.csv"))?;
            w.write_record(["rps_target", "mean_ttft", "mean_itl"])?;
            for p in &summary.phases {
                w.write_record([
                    format!("{}", p.rps_target),
                    p.mean_ttft.map(|v| format!("{v}")).unwrap_or_default(),
                    p.mean_itl.map(|v| format!("{v}")).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
        }
        Err(_) => warnings.push("summary.json missing; skipped per-phase tables".into()),
    }

    if !run_dir.join("decision_trace.csv").exists() {
        warnings.push("decision_trace.csv missing; plot data emitted without it".into());
    }
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_union_of_both_intervals() {
        let g = tick_grid(60.0, 2.0, 30.0);
        assert!(g.contains(&0.0) && g.contains(&2.0) && g.contains(&30.0) && g.contains(&60.0));
        assert_eq!(g.len(), 31); // multiples of 2 only; 30 and 60 coincide
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_with_offbeat_control_interval() {
        let g = tick_grid(10.0, 3.0, 4.0);
        assert_eq!(g, vec![0.0, 3.0, 4.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn compare_rejects_differing_seeds() {
        let mk = |seed| RunSummary {
            baseline: Baseline::Wva,
            seed,
            config_digest: "x".into(),
            duration: 1.0,
            phases: vec![],
            totals: RunTotals {
                arrived: 0,
                completed: 0,
                dropped: 0,
                drop_causes: BTreeMap::new(),
                queued_at_end: 0,
                in_flight_at_end: 0,
                mean_ttft: None,
                mean_itl: None,
                mean_replicas: 0.0,
                max_replicas_observed: 0,
            },
            event_log_sha256: "h".into(),
            commands_emitted: 0,
        };
        assert!(matches!(
            compare_runs(&mk(1), &mk(2)),
            Err(RunError::MismatchedTraffic(_))
        ));
    }

    #[test]
    fn identical_summaries_compare_to_zero_deltas() {
        let phase = PhaseSummary {
            start: 0.0,
            end: 10.0,
            rps_target: 2.0,
            arrived: 20,
            completed: 18,
            throughput_completed_rps: 1.8,
            drops: 2,
            drops_per_s: 0.2,
            drop_causes: BTreeMap::new(),
            mean_ttft: Some(0.5),
            mean_itl: Some(0.01),
            mean_replicas: 2.0,
            max_replicas_hit: false,
        };
        let s = RunSummary {
            baseline: Baseline::Wva,
            seed: 7,
            config_digest: "x".into(),
            duration: 10.0,
            phases: vec![phase],
            totals: RunTotals {
                arrived: 20,
                completed: 18,
                dropped: 2,
                drop_causes: BTreeMap::new(),
                queued_at_end: 0,
                in_flight_at_end: 0,
                mean_ttft: Some(0.5),
                mean_itl: Some(0.01),
                mean_replicas: 2.0,
                max_replicas_observed: 3,
            },
            event_log_sha256: "h".into(),
            commands_emitted: 4,
        };
        let rows = compare_runs(&s, &s).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].throughput_delta, 0.0);
        assert_eq!(rows[0].throughput_pct, Some(0.0));
        assert_eq!(rows[0].drop_ratio, Some(1.0));
    }
}
