use serde::{Deserialize, Serialize};

use crate::cluster::{ModelSpec, StartupCosts};
use crate::Millis;

/// Request and startup latency coefficients shared by all models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub warm_start_ms: f64,
    pub cold_extra_ms: f64,
    /// Decode slowdown per additional request in the batch.
    pub batch_slowdown: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            warm_start_ms: 560.0,
            cold_extra_ms: 20_000.0,
            batch_slowdown: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn costs(&self) -> StartupCosts {
        StartupCosts {
            warm_start_ms: self.warm_start_ms,
            cold_extra_ms: self.cold_extra_ms,
        }
    }

    pub fn prefill_ms(&self, spec: &ModelSpec, input_tokens: u32) -> Millis {
        (spec.prefill_ms_per_token * input_tokens as f64 + spec.prefill_base_ms).ceil() as Millis
    }

    pub fn decode_ms_per_token(&self, spec: &ModelSpec, inflight: usize) -> f64 {
        spec.decode_ms_per_token * (1.0 + self.batch_slowdown * inflight.saturating_sub(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        ModelSpec {
            id: "m".into(),
            weight_bytes: 1,
            parallelism: 1,
            max_batch: 8,
            layers: 1,
            layer_compute_ms: 1.0,
            prefill_ms_per_token: 0.05,
            prefill_base_ms: 15.0,
            decode_ms_per_token: 15.0,
            kv_bytes_per_token: 1,
            cold_load_ms: None,
        }
    }

    #[test]
    fn prefill_and_decode() {
        let l = LatencyModel::default();
        assert_eq!(l.prefill_ms(&spec(), 100), 20);
        assert_eq!(l.prefill_ms(&spec(), 101), 21);
        assert_eq!(l.decode_ms_per_token(&spec(), 5), 15.0);
        let slow = LatencyModel {
            batch_slowdown: 0.1,
            ..l
        };
        assert!((slow.decode_ms_per_token(&spec(), 3) - 18.0).abs() < 1e-12);
    }
}
