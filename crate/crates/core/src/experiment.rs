//! Runs configured experiments and writes their artifacts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::engine::metrics::{self, MetricsReport};
use crate::engine::{self, EngineError, Policy, RunOutput};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("trace hash mismatch: {first} has {a}, {second} has {b}")]
    TraceMismatch {
        first: PathBuf,
        a: String,
        second: PathBuf,
        b: String,
    },
    #[error("compare needs at least two reports")]
    TooFewReports,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.into(),
        source,
    }
}

/// Result of one policy run, with the directory its artifacts went to.
#[derive(Debug)]
pub struct PolicyRun {
    pub policy: Policy,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Runs every configured policy against the same trace. A single policy
/// writes straight into `out_dir`; a sweep writes one subdirectory each.
/// Runs are independent and execute on separate threads.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<PolicyRun>, ExperimentError> {
    let policies = cfg.policies()?;
    let trace = cfg.validate(base_dir)?;
    let setup = cfg.setup()?;
    let sweep = policies.len() > 1;

    let outputs: Vec<Result<RunOutput, EngineError>> = std::thread::scope(|s| {
        let handles: Vec<_> = policies
            .iter()
            .map(|&p| {
                let (setup, trace) = (&setup, &trace);
                s.spawn(move || engine::run(setup, trace, p, cfg.seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });

    let resolved = resolved_config(cfg);
    let mut runs = Vec::new();
    for (policy, out) in policies.into_iter().zip(outputs) {
        let mut out = out?;
        out.report.config = resolved.clone();
        let dir = if sweep {
            out_dir.join(policy.name())
        } else {
            out_dir.to_path_buf()
        };
        write_artifacts(&dir, &out)?;
        log::info!(
            "{}: {} requests, p99 ttft {:.0} ms",
            policy,
            out.report.overall.completed,
            out.report.overall.ttft_ms.p99
        );
        runs.push(PolicyRun {
            policy,
            dir,
            report: out.report,
        });
    }
    Ok(runs)
}

/// The configuration as embedded in reports. The output directory is dropped
/// so that reports do not depend on where they were written.
pub fn resolved_config(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut c = cfg.clone();
    c.output_dir = None;
    serde_json::to_value(&c).expect("config serializes")
}

/// Serialized form of `metrics.json`.
pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_artifacts(dir: &Path, out: &RunOutput) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("metrics.json");
    std::fs::write(&path, report_json(&out.report)).map_err(io_err(&path))?;

    let path = dir.join("summary.txt");
    std::fs::write(&path, metrics::summary_table(&out.report)).map_err(io_err(&path))?;

    let path = dir.join("requests.csv");
    let f = File::create(&path).map_err(io_err(&path))?;
    metrics::write_requests_csv(BufWriter::new(f), &out.requests).map_err(|source| {
        ExperimentError::Csv {
            path: path.clone(),
            source,
        }
    })?;

    let path = dir.join("gpu_roles.csv");
    let f = File::create(&path).map_err(io_err(&path))?;
    metrics::write_roles_csv(BufWriter::new(f), &out.transitions).map_err(|source| {
        ExperimentError::Csv {
            path: path.clone(),
            source,
        }
    })?;

    let path = dir.join("predictions.csv");
    let f = File::create(&path).map_err(io_err(&path))?;
    metrics::write_predictions_csv(BufWriter::new(f), &out.predictions).map_err(|source| {
        ExperimentError::Csv {
            path: path.clone(),
            source,
        }
    })?;

    let path = dir.join("decisions.jsonl");
    let f = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(f);
    for d in &out.decisions {
        serde_json::to_writer(&mut w, d).map_err(|source| ExperimentError::Json {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<MetricsReport, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.into(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub model: String,
    pub p95_ttft_ms: f64,
    pub p99_ttft_ms: f64,
    /// Baseline over candidate; above 1 means the candidate is faster.
    pub p95_ratio: f64,
    pub p99_ratio: f64,
    pub hit_ratio: Option<f64>,
    pub baseline_hit_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub trace_hash: String,
    pub rows: Vec<ComparisonRow>,
}

/// Compares reports produced from the same trace; the first is the baseline.
pub fn compare_reports(paths: &[PathBuf]) -> Result<Comparison, ExperimentError> {
    if paths.len() < 2 {
        return Err(ExperimentError::TooFewReports);
    }
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let base = &reports[0];
    for (p, r) in paths.iter().zip(&reports).skip(1) {
        if r.trace_hash != base.trace_hash {
            return Err(ExperimentError::TraceMismatch {
                first: paths[0].clone(),
                a: base.trace_hash.clone(),
                second: p.clone(),
                b: r.trace_hash.clone(),
            });
        }
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    let mut rows = Vec::new();
    for r in &reports {
        let base_models = base
            .models
            .iter()
            .map(|m| (&m.model, m))
            .collect::<std::collections::BTreeMap<_, _>>();
        for m in r.models.iter().chain(std::iter::once(&r.overall)) {
            let b = if m.model == r.overall.model {
                Some(&base.overall)
            } else {
                base_models.get(&m.model).copied()
            };
            let Some(b) = b else { continue };
            rows.push(ComparisonRow {
                policy: r.policy.clone(),
                model: m.model.clone(),
                p95_ttft_ms: m.ttft_ms.p95,
                p99_ttft_ms: m.ttft_ms.p99,
                p95_ratio: ratio(b.ttft_ms.p95, m.ttft_ms.p95),
                p99_ratio: ratio(b.ttft_ms.p99, m.ttft_ms.p99),
                baseline_hit_ratio: b.hit_ratio,
                hit_ratio: m.hit_ratio,
            });
        }
    }
    Ok(Comparison {
        baseline: base.policy.clone(),
        trace_hash: base.trace_hash.clone(),
        rows,
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "baseline: {}  trace: {}",
            self.baseline,
            &self.trace_hash[..12.min(self.trace_hash.len())]
        );
        let _ = writeln!(
            s,
            "{:<12} {:<16} {:>10} {:>10} {:>8} {:>8} {:>6}",
            "policy", "model", "p95_ttft", "p99_ttft", "p95_x", "p99_x", "hit"
        );
        for r in &self.rows {
            let hit = r
                .hit_ratio
                .map(|h| format!("{h:.2}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<12} {:<16} {:>10.0} {:>10.0} {:>8.3} {:>8.3} {:>6}",
                r.policy, r.model, r.p95_ttft_ms, r.p99_ttft_ms, r.p95_ratio, r.p99_ratio, hit
            );
        }
        s
    }
}
