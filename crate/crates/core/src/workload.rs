//! Deterministic traffic generation: phased arrival programs with
//! bounded-normal token-length sampling.
//!
//! Generation is pure given (program, duration, seed): arrivals and token
//! lengths come from independent seed-derived streams, so the same scenario
//! always produces a byte-identical request sequence.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::RequestSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    DeterministicUniform,
    Poisson,
}

/// Normal distribution clamped into [min, max], in whole tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundedNormal {
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub stdev: f64,
}

impl BoundedNormal {
    pub fn check(&self, field: &str) -> Result<(), (String, String)> {
        if self.min < 1 {
            return Err((format!("{field}.min"), "min must be >= 1".into()));
        }
        if (self.mean < self.min as f64) || (self.mean > self.max as f64) {
            return Err((
                format!("{field}.mean"),
                "mean must lie within [min, max]".into(),
            ));
        }
        if self.stdev <= 0.0 {
            return Err((format!("{field}.stdev"), "stdev must be > 0".into()));
        }
        Ok(())
    }
}

/// Phased traffic program. Each phase runs from its start time until the
/// next phase's start (or the end of the run) at a constant request rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProgram {
    /// (start_time, requests per second), strictly increasing start times,
    /// first phase at 0.
    pub phases: Vec<(f64, f64)>,
    #[serde(default)]
    pub arrival_process: ArrivalProcess,
    pub input_dist: BoundedNormal,
    pub output_dist: BoundedNormal,
}

impl TrafficProgram {
    pub fn check(&self) -> Result<(), (String, String)> {
        if self.phases.is_empty() {
            return Err(("phases".into(), "at least one phase required".into()));
        }
        if self.phases[0].0 != 0.0 {
            return Err(("phases[0]".into(), "first phase must start at 0".into()));
        }
        for w in self.phases.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err((
                    "phases".into(),
                    "phase start times must be strictly increasing".into(),
                ));
            }
        }
        for (i, (_, rps)) in self.phases.iter().enumerate() {
            if *rps < 0.0 {
                return Err((format!("phases[{i}]"), "rps must be >= 0".into()));
            }
        }
        self.input_dist.check("input_dist")?;
        self.output_dist.check("output_dist")?;
        Ok(())
    }

    /// The rps in effect at time `t`.
    pub fn rps_at(&self, t: f64) -> f64 {
        let mut rps = 0.0;
        for &(start, r) in &self.phases {
            if start <= t {
                rps = r;
            } else {
                break;
            }
        }
        rps
    }
}

/// Draws from normal(mean, stdev), clamps into [min, max], rounds to the
/// nearest integer >= 1.
pub fn sample_length(dist: &BoundedNormal, rng: &mut impl Rng) -> u64 {
    let normal = Normal::new(dist.mean, dist.stdev).expect("validated stdev > 0");
    let raw: f64 = normal.sample(rng);
    let clamped = raw.clamp(dist.min as f64, dist.max as f64);
    (clamped.round() as u64).max(1)
}

// Independent streams so that arrival timing never perturbs length sampling.
const STREAM_ARRIVALS: u64 = 1;
const STREAM_LENGTHS: u64 = 2;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the full arrival sequence for a program over `duration` seconds.
///
/// Deterministic-uniform phases place arrivals at `start + k/rps`;
/// poisson phases draw exponential inter-arrival times at the phase rate.
/// Request ids are sequential from 0 in arrival order.
pub fn generate_arrivals(program: &TrafficProgram, duration: f64, seed: u64) -> Vec<RequestSpec> {
    let mut arrivals_rng = stream_rng(seed, STREAM_ARRIVALS);
    let mut lengths_rng = stream_rng(seed, STREAM_LENGTHS);

    let mut times: Vec<f64> = Vec::new();
    const EPS: f64 = 1e-9;
    for (i, &(start, rps)) in program.phases.iter().enumerate() {
        let end = program
            .phases
            .get(i + 1)
            .map(|p| p.0)
            .unwrap_or(duration)
            .min(duration);
        if rps <= 0.0 || start >= end {
            continue;
        }
        match program.arrival_process {
            ArrivalProcess::DeterministicUniform => {
                let mut k = 0u64;
                loop {
                    let t = start + k as f64 / rps;
                    if t >= end - EPS {
                        break;
                    }
                    times.push(t);
                    k += 1;
                }
            }
            ArrivalProcess::Poisson => {
                let mut t = start;
                loop {
                    let u: f64 = arrivals_rng.gen_range(f64::MIN_POSITIVE..1.0);
                    t += -u.ln() / rps;
                    if t >= end - EPS {
                        break;
                    }
                    times.push(t);
                }
            }
        }
    }

    times
        .into_iter()
        .enumerate()
        .map(|(i, t)| RequestSpec {
            request_id: i as u64,
            arrival_time: t,
            input_tokens: sample_length(&program.input_dist, &mut lengths_rng),
            output_tokens: sample_length(&program.output_dist, &mut lengths_rng),
            prefix_key: None,
        })
        .collect()
}

/// Writes arrivals as CSV (request_id, arrival_time, input_tokens,
/// output_tokens) for replay and cross-language comparison.
pub fn export_arrivals_csv(
    arrivals: &[RequestSpec],
    path: &std::path::Path,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["request_id", "arrival_time", "input_tokens", "output_tokens"])?;
    for r in arrivals {
        w.write_record([
            r.request_id.to_string(),
            format!("{:.6}", r.arrival_time),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
        ])?;
    }
    w.flush()
}
