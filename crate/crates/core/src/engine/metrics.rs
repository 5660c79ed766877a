use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::{GpuId, InstanceId, ReplicaId, Role, RoleTransition, StartKind};
use crate::placement::ReplicaStatus;
use crate::Millis;

/// Per-request outcome; the latency phases sum to `ttft_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub model: String,
    pub arrival: Millis,
    pub admitted: Option<Millis>,
    pub first_token: Option<Millis>,
    pub done: Option<Millis>,
    pub instance: Option<InstanceId>,
    pub ttft_ms: Option<Millis>,
    pub tpot_ms: Option<f64>,
    pub queue_ms: Millis,
    pub startup_ms: Millis,
    pub load_stall_ms: Millis,
    pub prefill_ms: Millis,
    /// Start kind of the instance the request waited for, if any.
    pub waited_for: Option<StartKind>,
    pub in_warmup: bool,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_values(mut v: Vec<f64>) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 50.0),
            p95: percentile(&v, 95.0),
            p99: percentile(&v, 99.0),
            max: *v.last().expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleUpRecord {
    pub time: Millis,
    pub model: String,
    pub instance: InstanceId,
    pub gpus: Vec<GpuId>,
    pub kind: StartKind,
    /// A prewarmed replica was consumed.
    pub warm: bool,
    pub consumed: Option<ReplicaId>,
    pub consumed_status: Option<ReplicaStatus>,
    pub victims: Vec<ReplicaId>,
    pub startup_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model: String,
    pub day: u32,
    pub window: u32,
    pub predicted_avg: f64,
    pub actual_avg: f64,
    pub predicted_peak: f64,
    pub actual_peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelSummary {
    pub model: String,
    pub requests: usize,
    pub completed: usize,
    pub undrained: usize,
    pub ttft_ms: LatencyStats,
    pub tpot_ms: LatencyStats,
    pub scale_ups: usize,
    pub warm_starts: usize,
    pub hit_ratio: Option<f64>,
    /// Mean relative error of average-load predictions.
    pub prediction_error_avg: Option<f64>,
    pub prediction_error_peak: Option<f64>,
}

/// Time-weighted mean number of GPUs in each role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RoleOccupancy {
    pub idle: f64,
    pub universal: f64,
    pub dedicated: f64,
    pub grace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReplicaSummary {
    pub placed: u64,
    pub consumed: u64,
    pub invalidated: u64,
    pub retained: u64,
    pub skipped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub policy: String,
    pub seed: u64,
    pub trace_hash: String,
    pub config: serde_json::Value,
    pub sim_end_ms: Millis,
    pub events_processed: u64,
    pub overall: ModelSummary,
    pub models: Vec<ModelSummary>,
    pub hit_ratio: Option<f64>,
    pub role_occupancy: RoleOccupancy,
    pub replicas: ReplicaSummary,
    pub capacity_starved_events: u64,
    pub invariant_violations: u64,
    pub violation_samples: Vec<String>,
}

/// Mean relative error over windows with non-zero actual load.
pub fn mean_relative_error(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let errs: Vec<f64> = pairs
        .filter(|(_, a)| *a > 0.0)
        .map(|(p, a)| (p - a).abs() / a)
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn summarize(
    model: &str,
    records: &[&RequestRecord],
    scale_ups: &[&ScaleUpRecord],
    predictions: &[&PredictionRecord],
) -> ModelSummary {
    let measured: Vec<&&RequestRecord> = records.iter().filter(|r| !r.in_warmup).collect();
    let completed: Vec<&&&RequestRecord> = measured.iter().filter(|r| r.done.is_some()).collect();
    let warm = scale_ups.iter().filter(|s| s.warm).count();
    ModelSummary {
        model: model.to_string(),
        requests: measured.len(),
        completed: completed.len(),
        undrained: measured.len() - completed.len(),
        ttft_ms: LatencyStats::from_values(
            completed
                .iter()
                .filter_map(|r| r.ttft_ms)
                .map(|v| v as f64)
                .collect(),
        ),
        tpot_ms: LatencyStats::from_values(completed.iter().filter_map(|r| r.tpot_ms).collect()),
        scale_ups: scale_ups.len(),
        warm_starts: warm,
        hit_ratio: (!scale_ups.is_empty()).then(|| warm as f64 / scale_ups.len() as f64),
        prediction_error_avg: mean_relative_error(
            predictions.iter().map(|p| (p.predicted_avg, p.actual_avg)),
        ),
        prediction_error_peak: mean_relative_error(
            predictions
                .iter()
                .map(|p| (p.predicted_peak, p.actual_peak)),
        ),
    }
}

/// Integrates role counts over `[0, end]` from a transition log.
pub fn role_occupancy(gpus: usize, transitions: &[RoleTransition], end: Millis) -> RoleOccupancy {
    if end == 0 {
        return RoleOccupancy {
            idle: gpus as f64,
            ..Default::default()
        };
    }
    let idx = |r: &Role| match r {
        Role::Idle => 0,
        Role::Universal => 1,
        Role::Dedicated(_) => 2,
        Role::DedicatedGrace(_) => 3,
    };
    let mut counts = [gpus as i64, 0, 0, 0];
    let mut area = [0u128; 4];
    let mut last = 0;
    for t in transitions.iter().filter(|t| t.time <= end) {
        for (a, c) in area.iter_mut().zip(counts) {
            *a += c as u128 * (t.time - last) as u128;
        }
        last = t.time;
        counts[idx(&t.from)] -= 1;
        counts[idx(&t.to)] += 1;
    }
    for (a, c) in area.iter_mut().zip(counts) {
        *a += c as u128 * (end - last) as u128;
    }
    let f = |i: usize| area[i] as f64 / end as f64;
    RoleOccupancy {
        idle: f(0),
        universal: f(1),
        dedicated: f(2),
        grace: f(3),
    }
}

pub fn write_requests_csv<W: Write>(w: W, records: &[RequestRecord]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "id",
        "model",
        "arrival",
        "admitted",
        "first_token",
        "done",
        "instance",
        "ttft_ms",
        "tpot_ms",
        "queue_ms",
        "startup_ms",
        "load_stall_ms",
        "prefill_ms",
        "waited_for",
        "in_warmup",
    ])?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let kind = r.waited_for.map(|k| {
            serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        });
        wtr.write_record([
            r.id.to_string(),
            r.model.clone(),
            r.arrival.to_string(),
            opt(r.admitted),
            opt(r.first_token),
            opt(r.done),
            opt(r.instance),
            opt(r.ttft_ms),
            r.tpot_ms.map(|v| v.to_string()).unwrap_or_default(),
            r.queue_ms.to_string(),
            r.startup_ms.to_string(),
            r.load_stall_ms.to_string(),
            r.prefill_ms.to_string(),
            kind.unwrap_or_default(),
            r.in_warmup.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_roles_csv<W: Write>(w: W, transitions: &[RoleTransition]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["time", "gpu", "from", "to", "instance"])?;
    for t in transitions {
        let inst = match t.to {
            Role::Dedicated(i) | Role::DedicatedGrace(i) => i.to_string(),
            _ => String::new(),
        };
        wtr.write_record([
            t.time.to_string(),
            t.gpu.to_string(),
            t.from.name().into(),
            t.to.name().into(),
            inst,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_predictions_csv<W: Write>(w: W, preds: &[PredictionRecord]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in preds {
        wtr.serialize(p)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Human-readable per-model table.
pub fn summary_table(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "policy: {}  seed: {}  trace: {}",
        report.policy,
        report.seed,
        &report.trace_hash[..12.min(report.trace_hash.len())]
    );
    let _ = writeln!(
        s,
        "{:<16} {:>8} {:>10} {:>10} {:>10} {:>9} {:>8} {:>6}",
        "model", "done", "p50_ttft", "p95_ttft", "p99_ttft", "tpot", "scaleups", "hit"
    );
    let row = |s: &mut String, m: &ModelSummary| {
        let hit = m
            .hit_ratio
            .map(|h| format!("{:.2}", h))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10.0} {:>10.0} {:>10.0} {:>9.2} {:>8} {:>6}",
            m.model,
            m.completed,
            m.ttft_ms.p50,
            m.ttft_ms.p95,
            m.ttft_ms.p99,
            m.tpot_ms.mean,
            m.scale_ups,
            hit
        );
    };
    for m in &report.models {
        row(&mut s, m);
    }
    row(&mut s, &report.overall);
    let _ = writeln!(s, "invariant violations: {}", report.invariant_violations);
    s
}

/// Groups request records by model.
pub fn by_model(records: &[RequestRecord]) -> BTreeMap<&str, Vec<&RequestRecord>> {
    let mut m: BTreeMap<&str, Vec<&RequestRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.model.as_str()).or_default().push(r);
    }
    m
}
