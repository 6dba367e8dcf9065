//! Pluggable metric sources and capacity discovery: an in-simulator
//! source with fault injection, a file-backed replay source sharing the
//! same CSV schema, and inventory-file based GPU budget derivation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{FaultProgram, MetricSnapshot};
use crate::sim::Simulator;

/// Snapshot CSV columns, fixed. The simulator's time-series export and the
/// file source both use this schema.
pub const SNAPSHOT_CSV_HEADER: [&str; 7] = [
    "tick_time",
    "replica_id",
    "variant_id",
    "kv_usage",
    "queue_depth",
    "in_flight",
    "stale",
];

#[derive(Debug, thiserror::Error)]
pub enum SourceError {
    #[error("unknown source kind '{0}' (expected sim | file)")]
    UnknownKind(String),
    #[error("duplicate source name '{0}'")]
    DuplicateName(String),
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("parse error at {path} line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
}

/// How a named source is backed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceSpec {
    Sim,
    File { path: PathBuf },
}

/// A named metric source. Refreshes publish an immutable batch of
/// snapshots with a freshness timestamp; gets read the cached batch.
#[derive(Debug)]
pub enum MetricsSource {
    Sim {
        faults: FaultProgram,
        cached: Vec<MetricSnapshot>,
        refreshed_at: Option<f64>,
    },
    File {
        path: PathBuf,
        rows: Option<Vec<MetricSnapshot>>,
        cached: Vec<MetricSnapshot>,
        refreshed_at: Option<f64>,
    },
}

impl MetricsSource {
    /// Refresh the sim-backed source from live simulator state. Snapshots
    /// inside an outage window for their scope are flagged stale.
    pub fn refresh_from_sim(&mut self, sim: &Simulator, now: f64) -> Vec<MetricSnapshot> {
        match self {
            MetricsSource::Sim {
                faults,
                cached,
                refreshed_at,
            } => {
                let mut snaps = sim.snapshot_metrics();
                for s in &mut snaps {
                    s.stale = in_outage(faults, now, &s.variant_id);
                }
                *cached = snaps.clone();
                *refreshed_at = Some(now);
                snaps
            }
            MetricsSource::File { .. } => panic!("file source cannot refresh from a simulator"),
        }
    }

    /// Refresh the file-backed source: the latest row set with
    /// tick_time <= now, one row per replica. The file is opened lazily on
    /// first refresh.
    pub fn refresh_from_file(&mut self, now: f64) -> Result<Vec<MetricSnapshot>, SourceError> {
        match self {
            MetricsSource::File {
                path,
                rows,
                cached,
                refreshed_at,
            } => {
                if rows.is_none() {
                    *rows = Some(read_snapshot_csv(path)?);
                }
                let all = rows.as_ref().unwrap();
                // Latest tick at or before `now`, then that tick's rows.
                let latest = all
                    .iter()
                    .filter(|s| s.tick_time <= now)
                    .map(|s| s.tick_time)
                    .fold(f64::NEG_INFINITY, f64::max);
                let snaps: Vec<MetricSnapshot> = if latest.is_finite() {
                    all.iter()
                        .filter(|s| s.tick_time == latest)
                        .cloned()
                        .collect()
                } else {
                    Vec::new()
                };
                *cached = snaps.clone();
                *refreshed_at = Some(now);
                Ok(snaps)
            }
            MetricsSource::Sim { .. } => panic!("sim source cannot refresh from a file"),
        }
    }

    /// The cached batch published by the most recent refresh, with its
    /// freshness timestamp.
    pub fn get(&self) -> (&[MetricSnapshot], Option<f64>) {
        match self {
            MetricsSource::Sim {
                cached, refreshed_at, ..
            }
            | MetricsSource::File {
                cached, refreshed_at, ..
            } => (cached, *refreshed_at),
        }
    }
}

fn in_outage(faults: &FaultProgram, now: f64, variant_id: &str) -> bool {
    faults.outages.iter().any(|o| {
        now >= o.start
            && now < o.end
            && (o.scope == "all" || o.scope == format!("variant:{variant_id}"))
    })
}

/// Named sources built from configuration.
#[derive(Debug, Default)]
pub struct Registry {
    sources: BTreeMap<String, MetricsSource>,
}

impl Registry {
    pub fn get_mut(&mut self, name: &str) -> Option<&mut MetricsSource> {
        self.sources.get_mut(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.sources.keys().map(|s| s.as_str()).collect()
    }
}

/// Instantiates every configured source. Unknown kinds and duplicate names
/// fail here; file existence is checked lazily at first refresh.
pub fn registry_build(
    cfg: &[(String, SourceSpec)],
    faults: &FaultProgram,
) -> Result<Registry, SourceError> {
    let mut registry = Registry::default();
    for (name, spec) in cfg {
        if registry.sources.contains_key(name) {
            return Err(SourceError::DuplicateName(name.clone()));
        }
        let source = match spec {
            SourceSpec::Sim => MetricsSource::Sim {
                faults: faults.clone(),
                cached: Vec::new(),
                refreshed_at: None,
            },
            SourceSpec::File { path } => MetricsSource::File {
                path: path.clone(),
                rows: None,
                cached: Vec::new(),
                refreshed_at: None,
            },
        };
        registry.sources.insert(name.clone(), source);
    }
    Ok(registry)
}

/// Whether a variant's scale target has been deleted by fault injection at
/// or before `now` (the TargetResolved gate input).
pub fn target_deleted(faults: &FaultProgram, now: f64, variant_id: &str) -> bool {
    faults
        .target_deletions
        .iter()
        .any(|(t, v)| now >= *t && v == variant_id)
}

pub fn write_snapshot_csv(
    path: &Path,
    snapshots: &[MetricSnapshot],
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SNAPSHOT_CSV_HEADER)?;
    for s in snapshots {
        w.write_record([
            format!("{:.6}", s.tick_time),
            s.replica_id.clone(),
            s.variant_id.clone(),
            format!("{:.9}", s.kv_usage),
            s.queue_depth.to_string(),
            s.in_flight.to_string(),
            s.stale.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot_csv(path: &Path) -> Result<Vec<MetricSnapshot>, SourceError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|_| SourceError::MissingFile(path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2; // 1-based, after the header
        let parse = |message: String| SourceError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let row = row.map_err(|e| parse(e.to_string()))?;
        if row.len() != SNAPSHOT_CSV_HEADER.len() {
            return Err(parse(format!("expected 7 columns, got {}", row.len())));
        }
        let field = |idx: usize| row.get(idx).unwrap();
        out.push(MetricSnapshot {
            tick_time: field(0).parse().map_err(|_| parse("bad tick_time".into()))?,
            replica_id: field(1).to_string(),
            variant_id: field(2).to_string(),
            kv_usage: field(3).parse().map_err(|_| parse("bad kv_usage".into()))?,
            queue_depth: field(4).parse().map_err(|_| parse("bad queue_depth".into()))?,
            in_flight: field(5).parse().map_err(|_| parse("bad in_flight".into()))?,
            stale: field(6).parse().map_err(|_| parse("bad stale".into()))?,
        });
    }
    Ok(out)
}

/// Per-GPU-model counts on one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuInfo {
    pub count: u64,
    pub gpus_usable: u64,
}

/// Hardware inventory: node -> gpu model -> info.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityInventory {
    pub nodes: BTreeMap<String, BTreeMap<String, GpuInfo>>,
}

impl CapacityInventory {
    /// Total usable GPUs across the cluster.
    pub fn cluster_gpu_budget(&self) -> u64 {
        self.nodes
            .values()
            .flat_map(|m| m.values())
            .map(|i| i.gpus_usable)
            .sum()
    }

    /// Usable GPUs per hardware class.
    pub fn per_class_budget(&self) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = BTreeMap::new();
        for models in self.nodes.values() {
            for (model, info) in models {
                *out.entry(model.clone()).or_insert(0) += info.gpus_usable;
            }
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InventoryError {
    #[error("cannot read inventory {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("malformed inventory at {path} line {line}: {message}")]
    Malformed {
        path: String,
        line: u64,
        message: String,
    },
}

/// Reads a static inventory file (CSV: node_id, gpu_model, count,
/// gpus_usable) into a [`CapacityInventory`].
pub fn discover_capacity(path: &Path) -> Result<CapacityInventory, InventoryError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| InventoryError::Io(path.display().to_string(), e.into()))?;
    let mut inventory = CapacityInventory::default();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let bad = |message: String| InventoryError::Malformed {
            path: path.display().to_string(),
            line,
            message,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 4 {
            return Err(bad(format!("expected 4 columns, got {}", row.len())));
        }
        let count: u64 = row[2].parse().map_err(|_| bad("bad count".into()))?;
        let gpus_usable: u64 = row[3].parse().map_err(|_| bad("bad gpus_usable".into()))?;
        inventory
            .nodes
            .entry(row[0].to_string())
            .or_default()
            .insert(row[1].to_string(), GpuInfo { count, gpus_usable });
    }
    Ok(inventory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Outage;

    fn snap(t: f64, id: &str, kv: f64) -> MetricSnapshot {
        MetricSnapshot {
            replica_id: id.to_string(),
            variant_id: "a100".to_string(),
            tick_time: t,
            kv_usage: kv,
            queue_depth: 1,
            in_flight: 2,
            stale: false,
        }
    }

    #[test]
    fn registry_builds_and_rejects_duplicates() {
        let cfg = vec![("primary".to_string(), SourceSpec::Sim)];
        let reg = registry_build(&cfg, &FaultProgram::default()).unwrap();
        assert_eq!(reg.names(), vec!["primary"]);

        let dup = vec![
            ("a".to_string(), SourceSpec::Sim),
            ("a".to_string(), SourceSpec::Sim),
        ];
        assert!(matches!(
            registry_build(&dup, &FaultProgram::default()),
            Err(SourceError::DuplicateName(_))
        ));
    }

    #[test]
    fn missing_file_fails_at_refresh_not_build() {
        let cfg = vec![(
            "replay".to_string(),
            SourceSpec::File {
                path: PathBuf::from("/nonexistent/snapshots.csv"),
            },
        )];
        let mut reg = registry_build(&cfg, &FaultProgram::default()).unwrap();
        let src = reg.get_mut("replay").unwrap();
        assert!(matches!(
            src.refresh_from_file(0.0),
            Err(SourceError::MissingFile(_))
        ));
    }

    #[test]
    fn file_source_returns_latest_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snaps.csv");
        let rows = vec![snap(0.0, "r0", 0.1), snap(30.0, "r0", 0.5), snap(60.0, "r0", 0.9)];
        write_snapshot_csv(&path, &rows).unwrap();

        let mut src = MetricsSource::File {
            path,
            rows: None,
            cached: Vec::new(),
            refreshed_at: None,
        };
        let got = src.refresh_from_file(45.0).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].tick_time, 30.0);
        let (cached, fresh) = src.get();
        assert_eq!(cached, got.as_slice());
        assert_eq!(fresh, Some(45.0));
    }

    #[test]
    fn empty_file_yields_empty_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        write_snapshot_csv(&path, &[]).unwrap();
        let mut src = MetricsSource::File {
            path,
            rows: None,
            cached: Vec::new(),
            refreshed_at: None,
        };
        assert!(src.refresh_from_file(100.0).unwrap().is_empty());
    }

    #[test]
    fn malformed_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "tick_time,replica_id,variant_id,kv_usage,queue_depth,in_flight,stale\n\
             0.0,r0,a100,not-a-number,1,2,false\n",
        )
        .unwrap();
        match read_snapshot_csv(&path) {
            Err(SourceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        let rows = vec![snap(1.5, "r0", 0.25), snap(1.5, "r1", 0.75)];
        write_snapshot_csv(&path, &rows).unwrap();
        assert_eq!(read_snapshot_csv(&path).unwrap(), rows);
    }

    #[test]
    fn outage_scoping() {
        let faults = FaultProgram {
            outages: vec![
                Outage {
                    start: 100.0,
                    end: 160.0,
                    scope: "all".to_string(),
                },
                Outage {
                    start: 200.0,
                    end: 220.0,
                    scope: "variant:a100".to_string(),
                },
            ],
            target_deletions: vec![],
        };
        assert!(in_outage(&faults, 130.0, "a100"));
        assert!(in_outage(&faults, 130.0, "h100"));
        assert!(!in_outage(&faults, 170.0, "a100"));
        assert!(in_outage(&faults, 210.0, "a100"));
        assert!(!in_outage(&faults, 210.0, "h100"));
    }

    #[test]
    fn inventory_budget_sums_usable_gpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.csv");
        std::fs::write(
            &path,
            "node_id,gpu_model,count,gpus_usable\n\
             n0,A100,4,4\nn1,A100,4,4\nn2,A100,4,4\n",
        )
        .unwrap();
        let inv = discover_capacity(&path).unwrap();
        assert_eq!(inv.cluster_gpu_budget(), 12);
        assert_eq!(inv.per_class_budget()["A100"], 12);
    }

    #[test]
    fn inventory_order_independent() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(
            &a,
            "node_id,gpu_model,count,gpus_usable\nn0,A100,4,4\nn1,H100,8,6\n",
        )
        .unwrap();
        std::fs::write(
            &b,
            "node_id,gpu_model,count,gpus_usable\nn1,H100,8,6\nn0,A100,4,4\n",
        )
        .unwrap();
        assert_eq!(discover_capacity(&a).unwrap(), discover_capacity(&b).unwrap());
    }

    #[test]
    fn malformed_inventory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.csv");
        std::fs::write(&path, "node_id,gpu_model,count,gpus_usable\nn0,A100,x,4\n").unwrap();
        assert!(matches!(
            discover_capacity(&path),
            Err(InventoryError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn target_deletion_gate() {
        let faults = FaultProgram {
            outages: vec![],
            target_deletions: vec![(120.0, "a100".to_string())],
        };
        assert!(!target_deleted(&faults, 100.0, "a100"));
        assert!(target_deleted(&faults, 120.0, "a100"));
        assert!(!target_deleted(&faults, 300.0, "h100"));
    }
}
