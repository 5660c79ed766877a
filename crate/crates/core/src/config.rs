//! Experiment configuration file (TOML).
//!
//! Sizes use decimal units as they appear on spec sheets: `weight_gb` and
//! `gpu_memory_gb` are 10^9 bytes and `pcie_bandwidth_gbps` is 10^9 bytes per
//! second. Relative trace paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::ScalePolicy;
use crate::cluster::{ModelSpec, Topology};
use crate::engine::{EngineError, EngineSetup, LatencyModel, Policy, SimParams};
use crate::memswitch::LinkParams;
use crate::placement::PlacementParams;
use crate::predictor::WeightOrientation;
use crate::trace::{self, LengthDist, RateProfile, Request, SynthParams, TraceError, TraceFormat};
use crate::Millis;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("schema_version: unsupported version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// A policy name or `sweep` for all three.
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub latency: LatencyModel,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub placement: PlacementParams,
    #[serde(default)]
    pub autoscaler: ScalePolicy,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadConfig>,
}

fn default_policy() -> String {
    "sweep".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub servers: usize,
    pub gpus_per_server: usize,
    pub gpu_memory_gb: f64,
    #[serde(default = "default_page_mib")]
    pub page_size_mib: u64,
    pub pcie_bandwidth_gbps: f64,
    /// Page-table update cost; the default maps 10 GiB in 200 ms.
    #[serde(default = "default_map_ms")]
    pub map_ms_per_page: f64,
    #[serde(default = "default_chunk_pages")]
    pub chunk_pages: u64,
}

fn default_page_mib() -> u64 {
    2
}
fn default_map_ms() -> f64 {
    0.0390625
}
fn default_chunk_pages() -> u64 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub id: String,
    pub weight_gb: f64,
    pub parallelism: u32,
    pub max_batch: u32,
    pub layers: u32,
    pub layer_compute_ms: f64,
    pub prefill_ms_per_token: f64,
    pub prefill_base_ms: f64,
    pub decode_ms_per_token: f64,
    pub kv_bytes_per_token: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cold_load_ms: Option<f64>,
}

impl ModelConfig {
    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            id: self.id.clone(),
            weight_bytes: (self.weight_gb * 1e9).round() as u64,
            parallelism: self.parallelism,
            max_batch: self.max_batch,
            layers: self.layers,
            layer_compute_ms: self.layer_compute_ms,
            prefill_ms_per_token: self.prefill_ms_per_token,
            prefill_base_ms: self.prefill_base_ms,
            decode_ms_per_token: self.decode_ms_per_token,
            kv_bytes_per_token: self.kv_bytes_per_token,
            cold_load_ms: self.cold_load_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub window_ms: Millis,
    pub day_ms: Millis,
    pub seasonal_days: u32,
    pub lookback: u32,
    pub orientation: WeightOrientation,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            window_ms: 300_000,
            day_ms: 86_400_000,
            seasonal_days: 3,
            lookback: 6,
            orientation: WeightOrientation::RecentHeaviest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceFileFormat {
    #[default]
    Jsonl,
    AzureCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub path: PathBuf,
    #[serde(default)]
    pub format: TraceFileFormat,
    /// Model assigned to every request of a single-model CSV trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    /// Popularity order; defaults to the order of `models`.
    #[serde(default)]
    pub models: Vec<String>,
    pub alpha: f64,
    pub rps: f64,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lengths: LengthDist,
    #[serde(default)]
    pub profile: RateProfile,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(cfg.schema_version));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn policies(&self) -> Result<Vec<Policy>, ConfigError> {
        if self.policy == "sweep" {
            return Ok(Policy::ALL.to_vec());
        }
        self.policy
            .parse::<Policy>()
            .map(|p| vec![p])
            .map_err(|e| invalid("policy", e))
    }

    pub fn setup(&self) -> Result<EngineSetup, ConfigError> {
        let c = &self.cluster;
        if !(c.gpu_memory_gb > 0.0) {
            return Err(invalid("cluster.gpu_memory_gb", "must be positive"));
        }
        if c.page_size_mib == 0 {
            return Err(invalid("cluster.page_size_mib", "must be positive"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if !(m.weight_gb > 0.0) {
                return Err(invalid(
                    &format!("models[{i}].weight_gb"),
                    "must be positive",
                ));
            }
        }
        let page_size = c.page_size_mib << 20;
        let setup = EngineSetup {
            topology: Topology {
                servers: c.servers,
                gpus_per_server: c.gpus_per_server,
                pages_per_gpu: (c.gpu_memory_gb * 1e9) as u64 / page_size,
            },
            link: LinkParams {
                bandwidth_bytes_per_ms: c.pcie_bandwidth_gbps * 1e6,
                map_ms_per_page: c.map_ms_per_page,
                page_size,
                chunk_pages: c.chunk_pages,
            },
            latency: self.latency,
            models: self.models.iter().map(ModelConfig::to_spec).collect(),
            window_ms: self.predictor.window_ms,
            day_ms: self.predictor.day_ms,
            seasonal_days: self.predictor.seasonal_days,
            lookback: self.predictor.lookback,
            orientation: self.predictor.orientation,
            placement: self.placement,
            scaling: self.autoscaler,
            sim: self.sim.clone(),
        };
        setup.validate()?;
        Ok(setup)
    }

    /// Full validation: schema, engine parameters, trace source and the
    /// models the trace references.
    pub fn validate(&self, base_dir: &Path) -> Result<Vec<Request>, ConfigError> {
        self.policies()?;
        self.setup()?;
        let trace = self.load_trace(base_dir)?;
        for r in &trace {
            if !self.models.iter().any(|m| m.id == r.model_id) {
                return Err(invalid(
                    "trace",
                    format!("request {} references unknown model `{}`", r.id, r.model_id),
                ));
            }
        }
        if trace.is_empty() {
            return Err(invalid("trace", "trace is empty"));
        }
        Ok(trace)
    }

    pub fn load_trace(&self, base_dir: &Path) -> Result<Vec<Request>, ConfigError> {
        match (&self.trace, &self.workload) {
            (Some(_), Some(_)) => Err(invalid(
                "trace",
                "set either [trace] or [workload], not both",
            )),
            (None, None) => Err(invalid("trace", "one of [trace] or [workload] is required")),
            (Some(src), None) => {
                let path = if src.path.is_absolute() {
                    src.path.clone()
                } else {
                    base_dir.join(&src.path)
                };
                match src.format {
                    TraceFileFormat::Jsonl => Ok(trace::load_trace(&path, TraceFormat::Jsonl)?),
                    TraceFileFormat::AzureCsv => {
                        let model = src
                            .model
                            .as_deref()
                            .ok_or_else(|| invalid("trace.model", "required for azure_csv"))?;
                        Ok(trace::import_azure_csv(&path, model)?)
                    }
                }
            }
            (None, Some(w)) => {
                let models = if w.models.is_empty() {
                    self.models.iter().map(|m| m.id.clone()).collect()
                } else {
                    w.models.clone()
                };
                let params = SynthParams {
                    models,
                    alpha: w.alpha,
                    rps: w.rps,
                    duration_s: w.duration_s,
                    seed: w.seed.unwrap_or(self.seed),
                    lengths: w.lengths.clone(),
                    profile: w.profile.clone(),
                };
                Ok(trace::synthesize_workload(&params)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 7
policy = "warmserve"

[cluster]
servers = 1
gpus_per_server = 2
gpu_memory_gb = 80
pcie_bandwidth_gbps = 128

[[models]]
id = "m"
weight_gb = 12.55
parallelism = 1
max_batch = 32
layers = 32
layer_compute_ms = 1.0
prefill_ms_per_token = 0.05
prefill_base_ms = 15
decode_ms_per_token = 15
kv_bytes_per_token = 524288

[workload]
alpha = 1.0
rps = 1.0
duration_s = 10
"#;

    #[test]
    fn minimal_config_resolves() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let s = cfg.setup().unwrap();
        assert_eq!(s.link.bandwidth_bytes_per_ms, 1.28e8);
        assert_eq!(s.link.page_size, 2 << 20);
        assert_eq!(s.topology.pages_per_gpu, 80_000_000_000 / (2 << 20));
        assert_eq!(s.models[0].weight_bytes, 12_550_000_000);
        assert_eq!(cfg.policies().unwrap(), vec![Policy::Warmserve]);
        let trace = cfg.validate(Path::new(".")).unwrap();
        assert!(!trace.is_empty());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn field_paths_in_errors() {
        let bad = MINIMAL.replace("parallelism = 1", "parallelism = 4");
        let err = ExperimentConfig::from_toml(&bad)
            .unwrap()
            .setup()
            .unwrap_err();
        assert!(
            err.to_string().starts_with("models[0].parallelism"),
            "{err}"
        );
        let bad = MINIMAL.replace("schema_version = 1", "schema_version = 9");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(ConfigError::Schema(9))
        ));
        let bad = MINIMAL.replace("servers = 1", "servers = 1\nbogus = 2");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn unknown_trace_model_is_named() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("t.jsonl"),
            "{\"ts\":0,\"model\":\"ghost\",\"in\":1,\"out\":1}\n",
        )
        .unwrap();
        let text = MINIMAL.replace(
            "[workload]\nalpha = 1.0\nrps = 1.0\nduration_s = 10\n",
            "[trace]\npath = \"t.jsonl\"\n",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let err = cfg.validate(dir.path()).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }
}
