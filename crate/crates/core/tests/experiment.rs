mod common;

use std::fs;
use std::path::{Path, PathBuf};

use prewarm_sim::config::{ConfigError, ExperimentConfig};
use prewarm_sim::experiment::{compare_reports, load_report, run_experiment, ExperimentError};

const TINY: &str = r#"
schema_version = 1
seed = 3
policy = "warmserve"

[cluster]
servers = 1
gpus_per_server = 4
gpu_memory_gb = 40
pcie_bandwidth_gbps = 32

[latency]
warm_start_ms = 500
cold_extra_ms = 4000

[[models]]
id = "small"
weight_gb = 4
parallelism = 1
max_batch = 4
layers = 16
layer_compute_ms = 0.5
prefill_ms_per_token = 0.05
prefill_base_ms = 10
decode_ms_per_token = 20
kv_bytes_per_token = 65536

[[models]]
id = "pair"
weight_gb = 8
parallelism = 2
max_batch = 4
layers = 16
layer_compute_ms = 0.5
prefill_ms_per_token = 0.05
prefill_base_ms = 10
decode_ms_per_token = 20
kv_bytes_per_token = 65536

[predictor]
window_ms = 60000
day_ms = 600000

[trace]
path = "trace.jsonl"
"#;

fn write_trace(dir: &Path, models: &[&str]) {
    let lines: Vec<String> = (0..40)
        .map(|i| {
            format!(
                r#"{{"ts_ms": {}, "model": "{}", "input_tokens": 64, "output_tokens": 16}}"#,
                i * 15_000,
                models[i % models.len()]
            )
        })
        .collect();
    fs::write(dir.join("trace.jsonl"), lines.join("\n") + "\n").unwrap();
}

fn tiny(dir: &Path, policy: &str) -> ExperimentConfig {
    write_trace(dir, &["small", "pair", "small"]);
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.policy = policy.into();
    cfg
}

#[test]
fn single_run_writes_parseable_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "warmserve");
    let out = tmp.path().join("out");
    let runs = run_experiment(&cfg, tmp.path(), &out).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].dir, out);

    let report = load_report(&out.join("metrics.json")).unwrap();
    assert_eq!(report.policy, "warmserve");
    assert_eq!(report.overall.requests, 40);
    assert_eq!(report.config["seed"], 3);
    assert!(fs::read_to_string(out.join("summary.txt"))
        .unwrap()
        .contains("small"));

    let mut rdr = csv::Reader::from_path(out.join("requests.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 40);
    for f in ["gpu_roles.csv", "predictions.csv"] {
        let mut rdr = csv::Reader::from_path(out.join(f)).unwrap();
        assert!(!rdr.headers().unwrap().is_empty());
        for r in rdr.records() {
            r.unwrap();
        }
    }
    for line in fs::read_to_string(out.join("decisions.jsonl"))
        .unwrap()
        .lines()
    {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string());
    }
}

#[test]
fn sweep_replays_one_trace_per_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "sweep");
    let out = tmp.path().join("sweep");
    let runs = run_experiment(&cfg, tmp.path(), &out).unwrap();
    let names: Vec<_> = runs.iter().map(|r| r.policy.name()).collect();
    assert_eq!(names, ["warmserve", "sllm_gpu", "no_prewarm"]);
    let hashes: Vec<String> = runs
        .iter()
        .map(|r| {
            assert_eq!(r.dir, out.join(r.policy.name()));
            load_report(&r.dir.join("metrics.json")).unwrap().trace_hash
        })
        .collect();
    assert!(hashes.iter().all(|h| *h == hashes[0]));
}

#[test]
fn unknown_trace_model_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "warmserve");
    write_trace(tmp.path(), &["small", "ghost-13b"]);
    let err = cfg.validate(tmp.path()).unwrap_err();
    assert!(err.to_string().contains("ghost-13b"), "{err}");
}

#[test]
fn invalid_fields_report_their_path() {
    let mut bad = ExperimentConfig::from_toml(TINY).unwrap();
    bad.models[1].max_batch = 0;
    let err = bad.setup().unwrap_err();
    assert!(err.to_string().contains("models[1].max_batch"), "{err}");

    let unknown = TINY.replace("seed = 3", "seed = 3\nsed = 4");
    assert!(matches!(
        ExperimentConfig::from_toml(&unknown),
        Err(ConfigError::Parse(_))
    ));
    let schema = TINY.replace("schema_version = 1", "schema_version = 9");
    assert!(matches!(
        ExperimentConfig::from_toml(&schema),
        Err(ConfigError::Schema(9))
    ));
}

fn sweep_reports(dir: &Path, cfg: &ExperimentConfig) -> Vec<PathBuf> {
    run_experiment(cfg, dir, &dir.join("runs"))
        .unwrap()
        .into_iter()
        .map(|r| r.dir.join("metrics.json"))
        .collect()
}

#[test]
fn self_comparison_gives_unit_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "warmserve");
    let r = sweep_reports(tmp.path(), &cfg).remove(0);
    let cmp = compare_reports(&[r.clone(), r]).unwrap();
    assert!(!cmp.rows.is_empty());
    for row in &cmp.rows {
        if row.p99_ttft_ms > 0.0 {
            assert_eq!(row.p99_ratio, 1.0);
            assert_eq!(row.p95_ratio, 1.0);
        }
        assert_eq!(row.hit_ratio, row.baseline_hit_ratio);
    }
}

#[test]
fn mismatched_traces_are_rejected() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = sweep_reports(a.path(), &tiny(a.path(), "warmserve")).remove(0);
    let cfg = tiny(b.path(), "warmserve");
    write_trace(b.path(), &["pair"]);
    let rb = sweep_reports(b.path(), &cfg).remove(0);
    assert!(matches!(
        compare_reports(&[ra.clone(), rb]),
        Err(ExperimentError::TraceMismatch { .. })
    ));
    assert!(matches!(
        compare_reports(&[ra]),
        Err(ExperimentError::TooFewReports)
    ));
}

#[test]
fn example_config_favours_prewarming() {
    let tmp = tempfile::tempdir().unwrap();
    let path = common::example_config_path();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.policy, "sweep");
    let runs = run_experiment(&cfg, path.parent().unwrap(), tmp.path()).unwrap();
    let reports: Vec<PathBuf> = runs.iter().map(|r| r.dir.join("metrics.json")).collect();

    // no_prewarm as the baseline, warmserve as the candidate.
    let cmp = compare_reports(&[reports[2].clone(), reports[0].clone()]).unwrap();
    let overall = cmp
        .rows
        .iter()
        .find(|r| r.policy == "warmserve" && r.model == "all")
        .expect("overall row");
    assert!(overall.p99_ratio > 1.0, "{overall:?}");

    // The reported hit ratio matches a recount of the audit log.
    for r in &runs {
        let log = fs::read_to_string(r.dir.join("decisions.jsonl")).unwrap();
        let (mut warm, mut all) = (0, 0);
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            if v["event"] == "scale_up" && v["time"].as_u64().unwrap() >= cfg.sim.warmup_ms {
                all += 1;
                warm += v["warm"].as_bool().unwrap() as u32;
            }
        }
        let want = (all > 0).then(|| warm as f64 / all as f64);
        assert_eq!(r.report.hit_ratio, want, "{}", r.policy);
    }
}
