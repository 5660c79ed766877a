//! GPU workers, prewarm slots and serving instances.
//!
//! Each GPU is in one of four roles. An idle GPU holds nothing; a universal
//! GPU holds one or more prewarm slots; a dedicated GPU runs exactly one
//! instance whose weights live in the single active slot and whose KV cache
//! occupies every other mapped page; a dedicated GPU in grace still runs its
//! instance but may release surplus KV pages for proactive prewarming.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memswitch::{
    self, LinkParams, MapKind, MapTarget, MappingOp, TransferPlan, UtilityTimeline,
};
use crate::Millis;

pub type GpuId = usize;
pub type InstanceId = u64;
pub type SlotId = u64;
pub type ReplicaId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("gpu {gpu}: insufficient pages (need {need}, free {free})")]
    InsufficientPages { gpu: GpuId, need: u64, free: u64 },
    #[error("gpu {gpu} already holds a slot for `{model}`")]
    DuplicateSlot { gpu: GpuId, model: String },
    #[error("gpu {gpu} is dedicated to live instance {instance}")]
    GpuBusy { gpu: GpuId, instance: InstanceId },
    #[error("gpu {0} cannot host prewarms in its current role")]
    NotPrewarmable(GpuId),
    #[error("gpu group {0:?} is invalid for this model")]
    BadGroup(Vec<GpuId>),
    #[error("instance {0} is not in the expected state")]
    WrongState(InstanceId),
    #[error("instance {0} still has inflight requests")]
    InflightNotEmpty(InstanceId),
}

/// Static description of a servable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub weight_bytes: u64,
    /// GPUs per instance.
    pub parallelism: u32,
    pub max_batch: u32,
    pub layers: u32,
    /// Forward time of one layer in the first iteration, used to decide how
    /// many layers must be resident before inference can start.
    pub layer_compute_ms: f64,
    pub prefill_ms_per_token: f64,
    pub prefill_base_ms: f64,
    pub decode_ms_per_token: f64,
    /// KV bytes per token summed over all GPUs of an instance.
    pub kv_bytes_per_token: u64,
    /// Overrides the cold-load latency derived from size and bandwidth.
    #[serde(default)]
    pub cold_load_ms: Option<f64>,
}

impl ModelSpec {
    pub fn partition_bytes(&self) -> u64 {
        self.weight_bytes.div_ceil(self.parallelism as u64)
    }

    pub fn partition_pages(&self, page_size: u64) -> u64 {
        self.partition_bytes().div_ceil(page_size)
    }

    pub fn layer_bytes(&self) -> f64 {
        self.partition_bytes() as f64 / self.layers as f64
    }

    pub fn kv_bytes_per_token_per_gpu(&self) -> f64 {
        self.kv_bytes_per_token as f64 / self.parallelism as f64
    }

    /// Time to load the whole partition on every GPU of an instance.
    pub fn cold_load_latency(&self, link: &LinkParams) -> f64 {
        self.cold_load_ms
            .unwrap_or_else(|| memswitch::pipelined_load(self.partition_bytes(), link).finish_time)
    }

    /// Steady-state time to bring one layer of the partition on-device.
    pub fn layer_load_ms(&self, link: &LinkParams) -> f64 {
        let per_byte =
            (1.0 / link.bandwidth_bytes_per_ms).max(link.map_ms_per_page / link.page_size as f64);
        self.layer_bytes() * per_byte
    }
}

/// Smallest `k >= 1` such that, with layers `1..=k` resident and the rest
/// streamed in sequentially, inference never waits for a layer:
/// for every `l > k`, `(l - k) * load <= (l - 1) * compute`.
pub fn required_layers(layers: u32, layer_load_ms: f64, layer_compute_ms: f64) -> u32 {
    for k in 1..layers {
        let ok = (k + 1..=layers)
            .all(|l| (l - k) as f64 * layer_load_ms <= (l - 1) as f64 * layer_compute_ms);
        if ok {
            return k;
        }
    }
    layers
}

/// Layers that must be prewarmed so the rest loads behind compute, at the
/// given host-to-GPU bandwidth.
pub fn required_prewarm_layers(spec: &ModelSpec, bandwidth_bytes_per_ms: f64) -> u32 {
    let load = spec.layer_bytes() / bandwidth_bytes_per_ms;
    required_layers(spec.layers, load, spec.layer_compute_ms)
}

/// `max(M * R / C, K + M / C)`: the KV bytes a draining instance keeps.
pub fn reservation_target(kv_capacity: f64, max_batch: u32, inflight: u32, kv_used: f64) -> f64 {
    let c = max_batch as f64;
    (kv_capacity * inflight as f64 / c).max(kv_used + kv_capacity / c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role", content = "instance")]
pub enum Role {
    Idle,
    Universal,
    Dedicated(InstanceId),
    DedicatedGrace(InstanceId),
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Idle => "idle",
            Role::Universal => "universal",
            Role::Dedicated(_) => "dedicated",
            Role::DedicatedGrace(_) => "grace",
        }
    }

    pub fn is_dedicated(&self) -> bool {
        matches!(self, Role::Dedicated(_) | Role::DedicatedGrace(_))
    }

    /// Whether the worker lifecycle allows moving from `self` to `to`.
    pub fn can_transition(&self, to: &Role) -> bool {
        use Role::*;
        matches!(
            (self, to),
            (Idle, Universal)
                | (Universal, Dedicated(_))
                | (Dedicated(_), DedicatedGrace(_))
                | (DedicatedGrace(_), Universal)
                | (Universal, Idle)
                | (Idle, Dedicated(_))
        )
    }
}

/// Progress of a weight load into a slot. `start` is absolute.
#[derive(Debug, Clone)]
pub struct LoadProgress {
    pub start: f64,
    pub base_bytes: u64,
    pub plan: Arc<TransferPlan>,
}

impl LoadProgress {
    pub fn bytes_at(&self, t: f64) -> u64 {
        self.base_bytes + self.plan.bytes_at(t - self.start)
    }

    pub fn done_at(&self) -> f64 {
        self.start + self.plan.finish_time
    }

    pub fn time_to_bytes(&self, bytes: u64) -> f64 {
        self.start
            + self
                .plan
                .time_to_bytes(bytes.saturating_sub(self.base_bytes))
    }
}

#[derive(Debug, Clone)]
pub struct PrewarmSlot {
    pub slot_id: SlotId,
    pub model_id: String,
    pub replica: Option<ReplicaId>,
    pub mapped_pages: u64,
    /// Bytes this slot holds once fully loaded.
    pub weight_bytes: u64,
    pub layers: u32,
    pub required_layers: u32,
    pub active: bool,
    pub load: LoadProgress,
    pub created_at: Millis,
}

impl PrewarmSlot {
    pub fn weight_bytes_loaded(&self, t: f64) -> u64 {
        self.load.bytes_at(t).min(self.weight_bytes)
    }

    pub fn layers_loaded(&self, t: f64) -> u32 {
        let b = self.weight_bytes_loaded(t);
        if b >= self.weight_bytes {
            return self.layers;
        }
        let per_layer = self.weight_bytes as f64 / self.layers as f64;
        ((b as f64 / per_layer).floor() as u32).min(self.layers)
    }

    /// When `layers` layers are resident.
    pub fn time_to_layers(&self, layers: u32) -> f64 {
        let per_layer = self.weight_bytes as f64 / self.layers as f64;
        let bytes = ((layers as f64 * per_layer).ceil() as u64).min(self.weight_bytes);
        self.load.time_to_bytes(bytes)
    }

    pub fn ready_at(&self) -> f64 {
        self.time_to_layers(self.required_layers)
    }
}

#[derive(Debug, Clone)]
pub struct GpuWorker {
    pub gpu_id: GpuId,
    pub server_id: usize,
    pub total_pages: u64,
    pub role: Role,
    pub slots: Vec<PrewarmSlot>,
    pub kv_pages_mapped: u64,
    pub kv_pages_used: u64,
    /// Valid only while in grace.
    pub reservation_target: Option<u64>,
    /// When the host-to-GPU copy engine frees up for background loads.
    pub pcie_free_at: f64,
    pub utility: UtilityTimeline,
}

impl GpuWorker {
    pub fn slot_pages(&self) -> u64 {
        self.slots.iter().map(|s| s.mapped_pages).sum()
    }

    pub fn free_pages(&self) -> u64 {
        self.total_pages - self.slot_pages() - self.kv_pages_mapped
    }

    pub fn slot_for(&self, model: &str) -> Option<&PrewarmSlot> {
        self.slots.iter().find(|s| s.model_id == model)
    }

    pub fn active_slot(&self) -> Option<&PrewarmSlot> {
        self.slots.iter().find(|s| s.active)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Starting,
    Active,
    Grace,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    /// Every GPU already had the model's first layers resident.
    Warm,
    /// Some GPUs had a slot for the model, others loaded on the critical path.
    PartialWarm,
    Cold,
    /// Placed before the simulation started.
    Preexisting,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: InstanceId,
    pub model_id: String,
    pub gpus: Vec<GpuId>,
    pub state: InstanceState,
    pub inflight: BTreeSet<u64>,
    pub batch: u32,
    pub created_at: Millis,
    pub ready_at: Millis,
    /// KV capacity per GPU at promotion time.
    pub kv_capacity_bytes: u64,
    pub start_kind: StartKind,
}

/// Fixed startup stages that do not depend on weight loading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartupCosts {
    /// Engine, device and communication-group setup when those are prewarmed.
    pub warm_start_ms: f64,
    /// Extra setup paid on a cold start.
    pub cold_extra_ms: f64,
}

/// Decomposition of an instance's startup latency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartupBreakdown {
    pub kind: StartKind,
    pub base_ms: f64,
    /// Weight loading that could not be hidden behind other work.
    pub load_ms: f64,
    pub kv_stall_ms: f64,
}

impl StartupBreakdown {
    pub fn total_ms(&self) -> f64 {
        self.base_ms + self.load_ms + self.kv_stall_ms
    }
}

#[derive(Debug, Clone)]
pub struct Promotion {
    pub instance: InstanceId,
    pub startup: StartupBreakdown,
    /// Replicas whose slots were evicted from the promoted GPUs.
    pub evicted_replicas: BTreeSet<ReplicaId>,
    /// Replica linked to the promoted slots, if any.
    pub consumed_replicas: BTreeSet<ReplicaId>,
    /// Completion time of background KV mapping.
    pub kv_mapped_at: f64,
}

#[derive(Debug, Clone)]
pub struct SlotLoad {
    pub gpu: GpuId,
    pub slot_id: SlotId,
    pub ready_at: f64,
    pub done_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub servers: usize,
    pub gpus_per_server: usize,
    pub pages_per_gpu: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoleTransition {
    pub time: Millis,
    pub gpu: GpuId,
    pub from: Role,
    pub to: Role,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub topology: Topology,
    pub link: LinkParams,
    pub costs: StartupCosts,
    pub models: BTreeMap<String, ModelSpec>,
    pub workers: Vec<GpuWorker>,
    pub instances: BTreeMap<InstanceId, Instance>,
    next_instance: InstanceId,
    next_slot: SlotId,
    plan_cache: BTreeMap<u64, Arc<TransferPlan>>,
    pub transitions: Vec<RoleTransition>,
    pub violations: Vec<String>,
}

impl Cluster {
    pub fn new(
        topology: Topology,
        link: LinkParams,
        costs: StartupCosts,
        models: Vec<ModelSpec>,
    ) -> Self {
        let workers = (0..topology.servers * topology.gpus_per_server)
            .map(|g| GpuWorker {
                gpu_id: g,
                server_id: g / topology.gpus_per_server,
                total_pages: topology.pages_per_gpu,
                role: Role::Idle,
                slots: Vec::new(),
                kv_pages_mapped: 0,
                kv_pages_used: 0,
                reservation_target: None,
                pcie_free_at: 0.0,
                utility: UtilityTimeline::default(),
            })
            .collect();
        Self {
            topology,
            link,
            costs,
            models: models.into_iter().map(|m| (m.id.clone(), m)).collect(),
            workers,
            instances: BTreeMap::new(),
            next_instance: 0,
            next_slot: 0,
            plan_cache: BTreeMap::new(),
            transitions: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn model(&self, id: &str) -> Result<&ModelSpec, ClusterError> {
        self.models
            .get(id)
            .ok_or_else(|| ClusterError::UnknownModel(id.to_string()))
    }

    pub fn page_size(&self) -> u64 {
        self.link.page_size
    }

    pub fn gpu_count(&self) -> usize {
        self.workers.len()
    }

    pub fn server_of(&self, gpu: GpuId) -> usize {
        self.workers[gpu].server_id
    }

    pub fn required_layers_for(&self, spec: &ModelSpec) -> u32 {
        required_layers(
            spec.layers,
            spec.layer_load_ms(&self.link),
            spec.layer_compute_ms,
        )
    }

    fn plan_for(&mut self, bytes: u64) -> Arc<TransferPlan> {
        let link = self.link;
        self.plan_cache
            .entry(bytes)
            .or_insert_with(|| Arc::new(memswitch::pipelined_load(bytes, &link)))
            .clone()
    }

    fn set_role(&mut self, gpu: GpuId, to: Role, now: Millis) {
        let from = self.workers[gpu].role;
        if from == to {
            return;
        }
        if !from.can_transition(&to) {
            self.violations.push(format!(
                "t={now}: gpu {gpu} illegal role transition {from:?} -> {to:?}"
            ));
        }
        self.transitions.push(RoleTransition {
            time: now,
            gpu,
            from,
            to,
        });
        self.workers[gpu].role = to;
    }

    fn record_op(
        &mut self,
        gpu: GpuId,
        target: MapTarget,
        pages: u64,
        kind: MapKind,
        now: Millis,
    ) -> f64 {
        let op = MappingOp {
            gpu_id: gpu,
            target,
            pages,
            kind,
            issue_time: now,
            map_ms_per_page: self.link.map_ms_per_page,
        };
        self.workers[gpu].utility.enqueue(op)
    }

    /// Starts loading `model`'s partition into a new slot on `gpu`, queued
    /// behind earlier background loads and unmaps on that GPU.
    pub fn begin_prewarm(
        &mut self,
        gpu: GpuId,
        model: &str,
        pages: u64,
        now: Millis,
    ) -> Result<SlotLoad, ClusterError> {
        let spec = self.model(model)?.clone();
        let w = &self.workers[gpu];
        match w.role {
            Role::Idle | Role::Universal | Role::DedicatedGrace(_) => {}
            Role::Dedicated(_) => return Err(ClusterError::NotPrewarmable(gpu)),
        }
        if w.slot_for(model).is_some() {
            return Err(ClusterError::DuplicateSlot {
                gpu,
                model: model.to_string(),
            });
        }
        if w.free_pages() < pages {
            return Err(ClusterError::InsufficientPages {
                gpu,
                need: pages,
                free: w.free_pages(),
            });
        }
        let weight_bytes = spec.partition_bytes().min(pages * self.page_size());
        let start = (now as f64).max(w.pcie_free_at).max(w.utility.free_at());
        let plan = self.plan_for(weight_bytes);
        let required = self.required_layers_for(&spec).min(spec.layers);
        let slot_id = self.next_slot;
        self.next_slot += 1;
        let slot = PrewarmSlot {
            slot_id,
            model_id: model.to_string(),
            replica: None,
            mapped_pages: pages,
            weight_bytes,
            layers: spec.layers,
            required_layers: required,
            active: false,
            load: LoadProgress {
                start,
                base_bytes: 0,
                plan,
            },
            created_at: now,
        };
        let ready_at = slot.ready_at();
        let done_at = slot.load.done_at();
        let w = &mut self.workers[gpu];
        w.pcie_free_at = done_at;
        w.slots.push(slot);
        if w.role == Role::Idle {
            self.set_role(gpu, Role::Universal, now);
        }
        Ok(SlotLoad {
            gpu,
            slot_id,
            ready_at,
            done_at,
        })
    }

    /// Removes a slot and returns the replica it belonged to.
    pub fn evict_slot(&mut self, gpu: GpuId, slot_id: SlotId, now: Millis) -> Option<ReplicaId> {
        let idx = self.workers[gpu]
            .slots
            .iter()
            .position(|s| s.slot_id == slot_id)?;
        let slot = self.workers[gpu].slots.remove(idx);
        debug_assert!(
            !slot.active,
            "active slots are released with their instance"
        );
        self.record_op(
            gpu,
            MapTarget::Slot(slot_id),
            slot.mapped_pages,
            MapKind::Unmap,
            now,
        );
        let w = &mut self.workers[gpu];
        let t = now as f64;
        if slot.load.done_at() > t {
            w.pcie_free_at = w.slots.iter().map(|s| s.load.done_at()).fold(t, f64::max);
        }
        if w.role == Role::Universal && w.slots.is_empty() {
            self.set_role(gpu, Role::Idle, now);
        }
        slot.replica
    }

    /// Turns `gpus` into dedicated workers of a new instance of `model`.
    ///
    /// GPUs holding a slot for the model keep it and stream any missing layers
    /// behind compute; GPUs without one load the partition on the critical
    /// path. Every other slot on these GPUs is evicted.
    pub fn promote_to_dedicated(
        &mut self,
        gpus: &[GpuId],
        model: &str,
        now: Millis,
    ) -> Result<Promotion, ClusterError> {
        let spec = self.model(model)?.clone();
        self.check_group(gpus, &spec)?;
        for &g in gpus {
            if let Role::Dedicated(i) | Role::DedicatedGrace(i) = self.workers[g].role {
                return Err(ClusterError::GpuBusy {
                    gpu: g,
                    instance: i,
                });
            }
        }
        let t = now as f64;
        let partition_pages = spec.partition_pages(self.page_size());
        let layer_compute = spec.layer_compute_ms;

        let mut evicted = BTreeSet::new();
        let mut consumed = BTreeSet::new();
        let mut warm_gpus = 0usize;
        for &g in gpus {
            let others: Vec<SlotId> = self.workers[g]
                .slots
                .iter()
                .filter(|s| s.model_id != model)
                .map(|s| s.slot_id)
                .collect();
            for sid in others {
                if let Some(r) = self.evict_slot(g, sid, now) {
                    evicted.insert(r);
                }
            }
            if let Some(s) = self.workers[g].slot_for(model) {
                if s.layers_loaded(t) >= 1 {
                    warm_gpus += 1;
                }
                if let Some(r) = s.replica {
                    consumed.insert(r);
                }
            }
        }
        evicted.retain(|r| !consumed.contains(r));

        let kind = if warm_gpus == gpus.len() {
            StartKind::Warm
        } else if gpus
            .iter()
            .any(|&g| self.workers[g].slot_for(model).is_some())
        {
            StartKind::PartialWarm
        } else {
            StartKind::Cold
        };
        let base_ms = match kind {
            StartKind::Cold => self.costs.warm_start_ms + self.costs.cold_extra_ms,
            _ => self.costs.warm_start_ms,
        };

        let id = self.next_instance;
        self.next_instance += 1;
        let mut load_ms = 0.0f64;
        let mut kv_pages = 0;
        for &g in gpus {
            let existing = self.workers[g]
                .slots
                .iter()
                .position(|s| s.model_id == model);
            let stall = match existing {
                Some(idx) => {
                    let slot = &self.workers[g].slots[idx];
                    let resident = slot.weight_bytes_loaded(t);
                    let k = slot.layers_loaded(t);
                    let residual =
                        memswitch::pipelined_load(slot.weight_bytes - resident, &self.link);
                    let stall = layer_stall(
                        &residual,
                        slot.weight_bytes,
                        slot.layers,
                        resident,
                        k,
                        base_ms,
                        layer_compute,
                    );
                    let slot = &mut self.workers[g].slots[idx];
                    slot.load = LoadProgress {
                        start: t,
                        base_bytes: resident,
                        plan: Arc::new(residual),
                    };
                    slot.active = true;
                    slot.replica = None;
                    stall
                }
                None => {
                    let bytes = spec.partition_bytes();
                    let plan = self.plan_for(bytes);
                    let stall = if kind == StartKind::Cold {
                        plan.finish_time
                    } else {
                        layer_stall(&plan, bytes, spec.layers, 0, 0, base_ms, layer_compute)
                    };
                    let slot_id = self.next_slot;
                    self.next_slot += 1;
                    let required_layers = self.required_layers_for(&spec);
                    self.workers[g].slots.push(PrewarmSlot {
                        slot_id,
                        model_id: model.to_string(),
                        replica: None,
                        mapped_pages: partition_pages,
                        weight_bytes: bytes,
                        layers: spec.layers,
                        required_layers,
                        active: true,
                        load: LoadProgress {
                            start: t,
                            base_bytes: 0,
                            plan,
                        },
                        created_at: now,
                    });
                    stall
                }
            };
            load_ms = load_ms.max(stall);
            let w = &mut self.workers[g];
            let slot_done = w
                .slots
                .iter()
                .find(|s| s.active)
                .map(|s| s.load.done_at())
                .unwrap_or(t);
            w.pcie_free_at = slot_done;
            w.kv_pages_mapped = w.free_pages();
            w.kv_pages_used = 0;
            w.reservation_target = None;
            kv_pages = w.kv_pages_mapped;
            self.set_role(g, Role::Dedicated(id), now);
        }
        for &g in gpus {
            self.record_op(g, MapTarget::Kv, kv_pages, MapKind::Map, now);
        }
        let kv_mapped_at = t + kv_pages as f64 * self.link.map_ms_per_page;
        let consumption = spec.max_batch as f64 * spec.kv_bytes_per_token_per_gpu()
            / (spec.decode_ms_per_token.max(f64::MIN_POSITIVE) * self.page_size() as f64);
        let kv_stall_ms =
            memswitch::background_kv_mapping(kv_pages, self.link.map_ms_per_page, consumption);

        self.instances.insert(
            id,
            Instance {
                id,
                model_id: model.to_string(),
                gpus: gpus.to_vec(),
                state: InstanceState::Starting,
                inflight: BTreeSet::new(),
                batch: spec.max_batch,
                created_at: now,
                ready_at: now,
                kv_capacity_bytes: kv_pages * self.page_size(),
                start_kind: kind,
            },
        );
        Ok(Promotion {
            instance: id,
            startup: StartupBreakdown {
                kind,
                base_ms,
                load_ms,
                kv_stall_ms,
            },
            evicted_replicas: evicted,
            consumed_replicas: consumed,
            kv_mapped_at,
        })
    }

    /// GPUs must be distinct, on one server, and match the model's parallelism.
    pub fn check_group(&self, gpus: &[GpuId], spec: &ModelSpec) -> Result<(), ClusterError> {
        let distinct: BTreeSet<_> = gpus.iter().collect();
        let ok = gpus.len() == spec.parallelism as usize
            && distinct.len() == gpus.len()
            && gpus.iter().all(|&g| g < self.workers.len())
            && gpus
                .iter()
                .all(|&g| self.workers[g].server_id == self.workers[gpus[0]].server_id);
        if ok {
            Ok(())
        } else {
            Err(ClusterError::BadGroup(gpus.to_vec()))
        }
    }

    pub fn mark_active(&mut self, id: InstanceId, ready_at: Millis) -> Result<(), ClusterError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ClusterError::UnknownInstance(id))?;
        if inst.state != InstanceState::Starting {
            return Err(ClusterError::WrongState(id));
        }
        inst.state = InstanceState::Active;
        inst.ready_at = ready_at;
        Ok(())
    }

    pub fn enter_grace(&mut self, id: InstanceId, now: Millis) -> Result<(), ClusterError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ClusterError::UnknownInstance(id))?;
        if inst.state != InstanceState::Active {
            return Err(ClusterError::WrongState(id));
        }
        inst.state = InstanceState::Grace;
        let gpus = inst.gpus.clone();
        for g in gpus {
            self.set_role(g, Role::DedicatedGrace(id), now);
        }
        Ok(())
    }

    /// Terminates a drained grace instance. Its GPUs become universal
    /// workers; the served model's slot is kept when `retain` is set,
    /// otherwise dropped. Returns the retained `(gpu, slot)` pairs.
    pub fn release_instance(
        &mut self,
        id: InstanceId,
        now: Millis,
        retain: bool,
    ) -> Result<Vec<(GpuId, SlotId)>, ClusterError> {
        let inst = self
            .instances
            .get(&id)
            .ok_or(ClusterError::UnknownInstance(id))?;
        if inst.state != InstanceState::Grace {
            return Err(ClusterError::WrongState(id));
        }
        if !inst.inflight.is_empty() {
            return Err(ClusterError::InflightNotEmpty(id));
        }
        let gpus = inst.gpus.clone();
        let mut retained = Vec::new();
        for g in gpus {
            let kv = self.workers[g].kv_pages_mapped;
            if kv > 0 {
                self.record_op(g, MapTarget::Kv, kv, MapKind::Unmap, now);
            }
            let w = &mut self.workers[g];
            w.kv_pages_mapped = 0;
            w.kv_pages_used = 0;
            w.reservation_target = None;
            let mut active_slot = None;
            for s in w.slots.iter_mut().filter(|s| s.active) {
                s.active = false;
                active_slot = Some(s.slot_id);
            }
            self.set_role(g, Role::Universal, now);
            if let Some(sid) = active_slot {
                if retain {
                    retained.push((g, sid));
                } else {
                    self.evict_slot(g, sid, now);
                }
            }
            if self.workers[g].slots.is_empty() && self.workers[g].role == Role::Universal {
                self.set_role(g, Role::Idle, now);
            }
        }
        self.instances.get_mut(&id).expect("checked above").state = InstanceState::Terminated;
        Ok(retained)
    }

    /// After a request completes on a grace instance, shrinks the GPU's KV
    /// mapping to the reservation target. Returns the freed bytes.
    pub fn reclaim_on_completion(
        &mut self,
        id: InstanceId,
        gpu: GpuId,
        kv_used_bytes: f64,
        now: Millis,
    ) -> Result<u64, ClusterError> {
        let inst = self
            .instances
            .get(&id)
            .ok_or(ClusterError::UnknownInstance(id))?;
        if inst.state != InstanceState::Grace {
            return Err(ClusterError::WrongState(id));
        }
        let target = reservation_target(
            inst.kv_capacity_bytes as f64,
            inst.batch,
            inst.inflight.len() as u32,
            kv_used_bytes,
        );
        let page = self.page_size();
        let w = &mut self.workers[gpu];
        let reserved = w.kv_pages_mapped * page;
        let freed_pages = reclaimable_bytes(reserved as f64, target) as u64 / page;
        w.kv_pages_mapped -= freed_pages;
        w.kv_pages_used = (kv_used_bytes / page as f64).ceil() as u64;
        w.reservation_target = Some(target.ceil() as u64);
        if freed_pages > 0 {
            self.record_op(gpu, MapTarget::Kv, freed_pages, MapKind::Unmap, now);
        }
        Ok(freed_pages * page)
    }

    /// Grows a grace GPU's KV mapping back to cover `kv_used_bytes`, evicting
    /// proactively prewarmed slots (newest first) if free pages run out.
    /// Returns the replicas of evicted slots.
    pub fn ensure_kv(
        &mut self,
        gpu: GpuId,
        kv_used_bytes: f64,
        now: Millis,
    ) -> BTreeSet<ReplicaId> {
        let page = self.page_size();
        let need = (kv_used_bytes / page as f64).ceil() as u64;
        let mut evicted = BTreeSet::new();
        loop {
            let w = &mut self.workers[gpu];
            if w.kv_pages_mapped >= need {
                break;
            }
            let grow = (need - w.kv_pages_mapped).min(w.free_pages());
            w.kv_pages_mapped += grow;
            if w.kv_pages_mapped >= need {
                self.record_op(gpu, MapTarget::Kv, grow, MapKind::Map, now);
                break;
            }
            let victim = w
                .slots
                .iter()
                .filter(|s| !s.active)
                .max_by_key(|s| (s.created_at, s.slot_id))
                .map(|s| s.slot_id);
            match victim {
                Some(sid) => {
                    if let Some(r) = self.evict_slot(gpu, sid, now) {
                        evicted.insert(r);
                    }
                }
                None => break,
            }
        }
        evicted
    }

    pub fn role_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for w in &self.workers {
            let i = match w.role {
                Role::Idle => 0,
                Role::Universal => 1,
                Role::Dedicated(_) => 2,
                Role::DedicatedGrace(_) => 3,
            };
            c[i] += 1;
        }
        c
    }

    /// Structural invariants; returns human-readable violations.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = self.violations.clone();
        for w in &self.workers {
            let used = w.slot_pages() + w.kv_pages_mapped;
            if used > w.total_pages {
                out.push(format!(
                    "gpu {}: {} pages mapped of {}",
                    w.gpu_id, used, w.total_pages
                ));
            }
            let active = w.slots.iter().filter(|s| s.active).count();
            match w.role {
                Role::Dedicated(i) | Role::DedicatedGrace(i) => {
                    if active != 1 {
                        out.push(format!(
                            "gpu {}: dedicated with {active} active slots",
                            w.gpu_id
                        ));
                    }
                    if w.kv_pages_mapped == 0 && matches!(w.role, Role::Dedicated(_)) {
                        out.push(format!("gpu {}: dedicated without KV pages", w.gpu_id));
                    }
                    match self.instances.get(&i) {
                        Some(inst)
                            if inst.state != InstanceState::Terminated
                                && inst.gpus.contains(&w.gpu_id) => {}
                        _ => out.push(format!("gpu {}: dedicated to dead instance {i}", w.gpu_id)),
                    }
                }
                Role::Idle => {
                    if !w.slots.is_empty() || w.kv_pages_mapped != 0 {
                        out.push(format!("gpu {}: idle but holds memory", w.gpu_id));
                    }
                }
                Role::Universal => {
                    if active != 0 || w.kv_pages_mapped != 0 {
                        out.push(format!(
                            "gpu {}: universal with active slot or KV",
                            w.gpu_id
                        ));
                    }
                }
            }
            let models: BTreeSet<_> = w.slots.iter().map(|s| &s.model_id).collect();
            if models.len() != w.slots.len() {
                out.push(format!("gpu {}: duplicate model slots", w.gpu_id));
            }
            for s in &w.slots {
                if s.weight_bytes > s.mapped_pages * self.page_size() {
                    out.push(format!(
                        "gpu {} slot {}: weights exceed mapping",
                        w.gpu_id, s.slot_id
                    ));
                }
            }
        }
        for inst in self
            .instances
            .values()
            .filter(|i| i.state != InstanceState::Terminated)
        {
            let Some(spec) = self.models.get(&inst.model_id) else {
                out.push(format!("instance {}: unknown model", inst.id));
                continue;
            };
            if inst.gpus.len() != spec.parallelism as usize {
                out.push(format!("instance {}: wrong gpu count", inst.id));
            }
            if inst
                .gpus
                .iter()
                .any(|&g| self.workers[g].server_id != self.workers[inst.gpus[0]].server_id)
            {
                out.push(format!("instance {}: spans servers", inst.id));
            }
            if inst.inflight.len() > inst.batch as usize {
                out.push(format!("instance {}: inflight exceeds batch", inst.id));
            }
            for &g in &inst.gpus {
                match self.workers[g].role {
                    Role::Dedicated(i) | Role::DedicatedGrace(i) if i == inst.id => {}
                    r => out.push(format!("instance {}: gpu {g} has role {r:?}", inst.id)),
                }
            }
        }
        out
    }
}

/// Surplus above the reservation target, clamped at zero.
pub fn reclaimable_bytes(reserved: f64, target: f64) -> f64 {
    (reserved - target).max(0.0)
}

/// Extra time beyond `base_ms + layers * compute` before the last layer
/// finishes, when layers beyond `resident_layers` arrive per `plan`
/// (relative to the start of loading) and compute starts at `base_ms`.
fn layer_stall(
    plan: &TransferPlan,
    weight_bytes: u64,
    layers: u32,
    resident_bytes: u64,
    resident_layers: u32,
    base_ms: f64,
    layer_compute_ms: f64,
) -> f64 {
    let per_layer = weight_bytes as f64 / layers as f64;
    let mut stall = 0.0f64;
    for l in resident_layers + 1..=layers {
        let need = ((l as f64 * per_layer).ceil() as u64)
            .min(weight_bytes)
            .saturating_sub(resident_bytes);
        let arrive = plan.time_to_bytes(need);
        stall = stall.max(arrive - base_ms - (l - 1) as f64 * layer_compute_ms);
    }
    stall
}
