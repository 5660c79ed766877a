//! Per-model request routing, queueing and scale decisions.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{InstanceId, InstanceState};
use crate::Millis;

#[derive(Debug, Error, PartialEq)]
pub enum AutoscalerError {
    #[error("scale-down threshold must be in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("check interval must be positive")]
    BadInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalePolicy {
    pub check_interval_ms: Millis,
    pub scale_down_threshold: f64,
    pub sustain_checks: u32,
    /// Scale up once the queue holds more than this many requests per
    /// starting instance beyond a full batch. Zero means any queued request
    /// not covered by a starting instance triggers a scale-up.
    pub scale_up_queue_slack: u32,
}

impl Default for ScalePolicy {
    fn default() -> Self {
        Self {
            check_interval_ms: 10_000,
            scale_down_threshold: 0.5,
            sustain_checks: 3,
            scale_up_queue_slack: 0,
        }
    }
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), AutoscalerError> {
        if !(self.scale_down_threshold > 0.0 && self.scale_down_threshold < 1.0) {
            return Err(AutoscalerError::BadThreshold(self.scale_down_threshold));
        }
        if self.check_interval_ms == 0 {
            return Err(AutoscalerError::BadInterval);
        }
        Ok(())
    }
}

/// What the router needs to know about an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceView {
    pub id: InstanceId,
    pub state: InstanceState,
    pub inflight: u32,
    pub batch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RouteDecision {
    Instance { id: InstanceId },
    Enqueued { position: usize },
}

/// Least-inflight Active instance with spare batch capacity; ties go
/// round-robin after `last`.
pub fn pick_instance(instances: &[InstanceView], last: Option<InstanceId>) -> Option<InstanceId> {
    let open: Vec<&InstanceView> = instances
        .iter()
        .filter(|i| i.state == InstanceState::Active && i.inflight < i.batch)
        .collect();
    let min = open.iter().map(|i| i.inflight).min()?;
    let mut tied: Vec<InstanceId> = open
        .iter()
        .filter(|i| i.inflight == min)
        .map(|i| i.id)
        .collect();
    tied.sort_unstable();
    match last {
        Some(l) => Some(tied.iter().copied().find(|&id| id > l).unwrap_or(tied[0])),
        None => Some(tied[0]),
    }
}

#[derive(Debug, Clone, Default)]
struct ModelState {
    queue: VecDeque<u64>,
    last_routed: Option<InstanceId>,
    low_streak: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Autoscaler {
    pub policy: ScalePolicy,
    models: BTreeMap<String, ModelState>,
}

impl Autoscaler {
    pub fn new(policy: ScalePolicy) -> Self {
        Self {
            policy,
            models: BTreeMap::new(),
        }
    }

    /// Routes to an open instance or appends to the model's FIFO queue.
    pub fn route(
        &mut self,
        model: &str,
        request: u64,
        instances: &[InstanceView],
    ) -> RouteDecision {
        let st = self.models.entry(model.to_string()).or_default();
        // Never jump the queue.
        if st.queue.is_empty() {
            if let Some(id) = pick_instance(instances, st.last_routed) {
                st.last_routed = Some(id);
                return RouteDecision::Instance { id };
            }
        }
        st.queue.push_back(request);
        RouteDecision::Enqueued {
            position: st.queue.len() - 1,
        }
    }

    /// Pops the oldest queued request if some instance can take it.
    pub fn dispatch_next(
        &mut self,
        model: &str,
        instances: &[InstanceView],
    ) -> Option<(u64, InstanceId)> {
        let st = self.models.get_mut(model)?;
        st.queue.front()?;
        let id = pick_instance(instances, st.last_routed)?;
        st.last_routed = Some(id);
        st.queue.pop_front().map(|r| (r, id))
    }

    pub fn queue_len(&self, model: &str) -> usize {
        self.models.get(model).map_or(0, |s| s.queue.len())
    }

    pub fn queued(&self, model: &str) -> impl Iterator<Item = &u64> {
        self.models
            .get(model)
            .into_iter()
            .flat_map(|s| s.queue.iter())
    }

    pub fn models_with_queue(&self) -> Vec<String> {
        self.models
            .iter()
            .filter(|(_, s)| !s.queue.is_empty())
            .map(|(m, _)| m.clone())
            .collect()
    }

    /// Whether queued work exceeds what starting instances will absorb.
    pub fn needs_scale_up(&self, model: &str, starting: u32, batch: u32) -> bool {
        self.queue_len(model) as u64
            > starting as u64 * batch as u64 + self.policy.scale_up_queue_slack as u64
    }

    /// Periodic check: returns Active instances to move into grace.
    pub fn scale_down_check(&mut self, model: &str, instances: &[InstanceView]) -> Vec<InstanceId> {
        let queued = self.queue_len(model) as u64;
        let st = self.models.entry(model.to_string()).or_default();
        let active: Vec<&InstanceView> = instances
            .iter()
            .filter(|i| i.state == InstanceState::Active)
            .collect();
        if active.is_empty() {
            st.low_streak = 0;
            return Vec::new();
        }
        let inflight: u64 = active.iter().map(|i| i.inflight as u64).sum();
        let capacity: u64 = active.iter().map(|i| i.batch as u64).sum();
        let util = inflight as f64 / capacity as f64;
        if util >= self.policy.scale_down_threshold || queued > 0 {
            st.low_streak = 0;
            return Vec::new();
        }
        st.low_streak += 1;
        if st.low_streak < self.policy.sustain_checks {
            return Vec::new();
        }
        st.low_streak = 0;
        let load = inflight + queued;
        let batch = active[0].batch.max(1) as u64;
        let keep = if load == 0 {
            0
        } else {
            load.div_ceil(batch).max(1)
        } as usize;
        let mut order = active.clone();
        order.sort_by_key(|i| (i.inflight, std::cmp::Reverse(i.id)));
        order
            .into_iter()
            .take(active.len().saturating_sub(keep))
            .map(|i| i.id)
            .collect()
    }
}
