//! Deterministic discrete-event simulation of the serving cluster.

pub mod event;
pub mod latency;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{self, Autoscaler, InstanceView, RouteDecision, ScalePolicy};
use crate::cluster::{
    Cluster, ClusterError, InstanceId, InstanceState, ModelSpec, ReplicaId, RoleTransition,
    StartKind, Topology,
};
use crate::manager::{Manager, ModelDemand, ScaleUp};
use crate::memswitch::LinkParams;
use crate::placement::{Category, PlacementParams, Skip};
use crate::predictor::{
    PredictorError, PredictorParams, PredictorState, Target, WeightOrientation,
};
use crate::trace::{self, LoadTracker, Request, WindowGrid};
use crate::Millis;

pub use event::{Event, EventKind, EventQueue};
pub use latency::LatencyModel;
pub use metrics::{MetricsReport, ModelSummary, PredictionRecord, RequestRecord, ScaleUpRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Warmserve,
    SllmGpu,
    NoPrewarm,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Warmserve, Policy::SllmGpu, Policy::NoPrewarm];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Warmserve => "warmserve",
            Policy::SllmGpu => "sllm_gpu",
            Policy::NoPrewarm => "no_prewarm",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                format!("unknown policy `{s}` (expected warmserve, sllm_gpu or no_prewarm)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialInstance {
    pub model: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub drain_timeout_ms: Millis,
    /// Requests arriving earlier are simulated but excluded from metrics.
    pub warmup_ms: Millis,
    pub check_invariants: bool,
    pub initial_instances: Vec<InitialInstance>,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            drain_timeout_ms: 120_000,
            warmup_ms: 0,
            check_invariants: true,
            initial_instances: Vec::new(),
        }
    }
}

/// Everything the engine needs besides the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSetup {
    pub topology: Topology,
    pub link: LinkParams,
    pub latency: LatencyModel,
    pub models: Vec<ModelSpec>,
    pub window_ms: Millis,
    pub day_ms: Millis,
    pub seasonal_days: u32,
    pub lookback: u32,
    pub orientation: WeightOrientation,
    pub placement: PlacementParams,
    pub scaling: ScalePolicy,
    pub sim: SimParams,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("request {request} references unknown model `{model}`")]
    UnknownModel { request: u64, model: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

fn cfg_err(field: impl Into<String>, message: impl Into<String>) -> EngineError {
    EngineError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl EngineSetup {
    pub fn grid(&self) -> WindowGrid {
        WindowGrid::new(self.window_ms, (self.day_ms / self.window_ms) as u32)
    }

    pub fn predictor_params(&self) -> PredictorParams {
        PredictorParams {
            seasonal_days: self.seasonal_days,
            lookback: self.lookback,
            orientation: self.orientation,
            windows_per_day: (self.day_ms / self.window_ms.max(1)) as u32,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.window_ms == 0 {
            return Err(cfg_err("predictor.window_ms", "must be positive"));
        }
        if self.day_ms == 0 || !self.day_ms.is_multiple_of(self.window_ms) {
            return Err(cfg_err(
                "predictor.day_ms",
                "must be a positive multiple of window_ms",
            ));
        }
        self.predictor_params()
            .validate()
            .map_err(|e| cfg_err("predictor", e.to_string()))?;
        self.scaling
            .validate()
            .map_err(|e| cfg_err("autoscaler", e.to_string()))?;
        let t = &self.topology;
        if t.servers == 0 || t.gpus_per_server == 0 || t.pages_per_gpu == 0 {
            return Err(cfg_err(
                "cluster",
                "servers, gpus_per_server and memory must be positive",
            ));
        }
        let l = &self.link;
        if !(l.bandwidth_bytes_per_ms > 0.0) {
            return Err(cfg_err("cluster.pcie_bandwidth_gbps", "must be positive"));
        }
        if !(l.map_ms_per_page >= 0.0) {
            return Err(cfg_err("cluster.map_ms_per_page", "must be non-negative"));
        }
        if l.page_size == 0 || l.chunk_pages == 0 {
            return Err(cfg_err(
                "cluster.chunk_pages",
                "page size and chunk pages must be positive",
            ));
        }
        let lat = &self.latency;
        if !(lat.warm_start_ms >= 0.0 && lat.cold_extra_ms >= 0.0 && lat.batch_slowdown >= 0.0) {
            return Err(cfg_err("latency", "coefficients must be non-negative"));
        }
        if self.models.is_empty() {
            return Err(cfg_err("models", "at least one model is required"));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let f = |name: &str| format!("models[{i}].{name}");
            if !seen.insert(&m.id) {
                return Err(cfg_err(f("id"), format!("duplicate model `{}`", m.id)));
            }
            if m.parallelism == 0 || m.parallelism as usize > t.gpus_per_server {
                return Err(cfg_err(
                    f("parallelism"),
                    format!("must be in 1..={}", t.gpus_per_server),
                ));
            }
            if m.max_batch == 0 {
                return Err(cfg_err(f("max_batch"), "must be positive"));
            }
            if m.layers == 0 {
                return Err(cfg_err(f("layers"), "must be positive"));
            }
            if m.weight_bytes == 0 {
                return Err(cfg_err(f("weight_gb"), "must be positive"));
            }
            if m.partition_pages(l.page_size) >= t.pages_per_gpu {
                return Err(cfg_err(
                    f("weight_gb"),
                    "partition does not fit in GPU memory with room for KV cache",
                ));
            }
            let coeffs = [
                m.layer_compute_ms,
                m.prefill_ms_per_token,
                m.prefill_base_ms,
                m.decode_ms_per_token,
            ];
            if coeffs.iter().any(|c| !(*c >= 0.0)) {
                return Err(cfg_err(f("latency"), "coefficients must be non-negative"));
            }
        }
        for (i, inst) in self.sim.initial_instances.iter().enumerate() {
            if !seen.contains(&inst.model) {
                return Err(cfg_err(
                    format!("sim.initial_instances[{i}].model"),
                    format!("unknown model `{}`", inst.model),
                ));
            }
        }
        Ok(())
    }
}

/// One entry of the decision audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Decision {
    Plan {
        time: Millis,
        trigger: String,
        demands: Vec<ModelDemand>,
        placed: Vec<PlacedEntry>,
        skipped: Vec<Skip>,
        invalidated: Vec<ReplicaId>,
    },
    ScaleUp(ScaleUpRecord),
    Starved {
        time: Millis,
        model: String,
        queued: usize,
    },
    ScaleDown {
        time: Millis,
        model: String,
        instance: InstanceId,
    },
    Release {
        time: Millis,
        model: String,
        instance: InstanceId,
        retained: Option<ReplicaId>,
    },
    Reclaim {
        time: Millis,
        instance: InstanceId,
        freed_bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacedEntry {
    pub replica: ReplicaId,
    pub model: String,
    pub gpus: Vec<usize>,
    pub category: Category,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub requests: Vec<RequestRecord>,
    pub decisions: Vec<Decision>,
    pub transitions: Vec<RoleTransition>,
    pub predictions: Vec<PredictionRecord>,
    pub scale_ups: Vec<ScaleUpRecord>,
}

#[derive(Debug, Clone, Default)]
struct ReqState {
    admitted: Option<Millis>,
    instance: Option<InstanceId>,
    first_token: Option<Millis>,
    done: Option<Millis>,
    tpot: Option<f64>,
    queue: Millis,
    startup: Millis,
    stall: Millis,
    prefill: Millis,
    waited_for: Option<StartKind>,
}

#[derive(Debug, Clone, Copy)]
struct InstMeta {
    created: Millis,
    base_end: Millis,
    ready: Millis,
    kind: StartKind,
}

fn overlap(a0: Millis, a1: Millis, b0: Millis, b1: Millis) -> Millis {
    a1.min(b1).saturating_sub(a0.max(b0))
}

struct Sim<'a> {
    setup: &'a EngineSetup,
    policy: Policy,
    trace: &'a [Request],
    models: BTreeMap<String, ModelSpec>,
    q: EventQueue,
    mgr: Manager,
    scaler: Autoscaler,
    grid: WindowGrid,
    reqs: Vec<ReqState>,
    trackers: BTreeMap<String, LoadTracker>,
    predictors: BTreeMap<String, (PredictorState, PredictorState)>,
    pending: BTreeMap<String, (u64, f64, f64)>,
    demand: BTreeMap<String, (f64, f64)>,
    predictions: Vec<PredictionRecord>,
    decisions: Vec<Decision>,
    scale_ups: Vec<ScaleUpRecord>,
    meta: BTreeMap<InstanceId, InstMeta>,
    starving: BTreeSet<String>,
    starved_events: u64,
    skipped: u64,
    violations: BTreeSet<String>,
    end: Millis,
    events: u64,
}

/// Runs one policy over `trace`. Identical inputs give identical outputs.
pub fn run(
    setup: &EngineSetup,
    trace: &[Request],
    policy: Policy,
    seed: u64,
) -> Result<RunOutput, EngineError> {
    setup.validate()?;
    if trace.is_empty() {
        return Err(EngineError::EmptyTrace);
    }
    let models: BTreeMap<String, ModelSpec> = setup
        .models
        .iter()
        .map(|m| (m.id.clone(), m.clone()))
        .collect();
    for r in trace {
        if !models.contains_key(&r.model_id) {
            return Err(EngineError::UnknownModel {
                request: r.id,
                model: r.model_id.clone(),
            });
        }
    }
    let cluster = Cluster::new(
        setup.topology,
        setup.link,
        setup.latency.costs(),
        setup.models.clone(),
    );
    let mut predictors = BTreeMap::new();
    for m in models.keys() {
        let p = setup.predictor_params();
        predictors.insert(
            m.clone(),
            (
                PredictorState::new(m, Target::Average, p)?,
                PredictorState::new(m, Target::Peak, p)?,
            ),
        );
    }
    let last_arrival = trace.iter().map(|r| r.arrival).max().unwrap_or(0);
    let mut sim = Sim {
        setup,
        policy,
        trace,
        trackers: models
            .keys()
            .map(|m| (m.clone(), LoadTracker::new(0)))
            .collect(),
        models,
        q: EventQueue::default(),
        mgr: Manager::new(cluster, setup.placement),
        scaler: Autoscaler::new(setup.scaling),
        grid: setup.grid(),
        reqs: vec![ReqState::default(); trace.len()],
        predictors,
        pending: BTreeMap::new(),
        demand: BTreeMap::new(),
        predictions: Vec::new(),
        decisions: Vec::new(),
        scale_ups: Vec::new(),
        meta: BTreeMap::new(),
        starving: BTreeSet::new(),
        starved_events: 0,
        skipped: 0,
        violations: BTreeSet::new(),
        end: last_arrival + setup.sim.drain_timeout_ms,
        events: 0,
    };
    sim.start()?;
    sim.run_loop()?;
    Ok(sim.finish(seed))
}

impl<'a> Sim<'a> {
    fn start(&mut self) -> Result<(), EngineError> {
        for (i, init) in self.setup.sim.initial_instances.iter().enumerate() {
            for _ in 0..init.count {
                let up = self.mgr.scale_up(&init.model, 0)?.ok_or_else(|| {
                    cfg_err(
                        format!("sim.initial_instances[{i}].count"),
                        "not enough GPUs for initial instances",
                    )
                })?;
                self.mgr.cluster.mark_active(up.instance, 0)?;
                if let Some(inst) = self.mgr.cluster.instances.get_mut(&up.instance) {
                    inst.start_kind = StartKind::Preexisting;
                }
                self.meta.insert(
                    up.instance,
                    InstMeta {
                        created: 0,
                        base_end: 0,
                        ready: 0,
                        kind: StartKind::Preexisting,
                    },
                );
            }
        }
        for (i, r) in self.trace.iter().enumerate() {
            self.q.push(r.arrival, EventKind::Arrival { request: i });
        }
        if self.setup.window_ms <= self.end {
            self.q.push(
                self.setup.window_ms,
                EventKind::WindowBoundary { window: 1 },
            );
        }
        self.q
            .push(self.setup.scaling.check_interval_ms, EventKind::ScalerTick);
        Ok(())
    }

    fn run_loop(&mut self) -> Result<(), EngineError> {
        while let Some(ev) = self.q.pop() {
            if ev.time > self.end {
                break;
            }
            self.events += 1;
            let t = ev.time;
            match ev.kind {
                EventKind::Arrival { request } => self.on_arrival(request, t)?,
                EventKind::PrefillDone { request } => self.on_prefill_done(request, t),
                EventKind::RequestDone { request } => self.on_request_done(request, t)?,
                EventKind::WindowBoundary { window } => self.on_window(window, t)?,
                EventKind::ScalerTick => self.on_tick(t)?,
                EventKind::LoadDone { instance } => self.on_instance_ready(instance, t)?,
                EventKind::GraceRelease { instance } => self.release(instance, t)?,
                EventKind::MapDone { .. } => {}
            }
            if self.setup.sim.check_invariants {
                self.check(t);
            }
        }
        Ok(())
    }

    fn spec(&self, model: &str) -> &ModelSpec {
        &self.models[model]
    }

    fn views(&self, model: &str) -> Vec<InstanceView> {
        self.mgr
            .cluster
            .instances
            .values()
            .filter(|i| i.model_id == model && i.state != InstanceState::Terminated)
            .map(|i| InstanceView {
                id: i.id,
                state: i.state,
                inflight: i.inflight.len() as u32,
                batch: i.batch,
            })
            .collect()
    }

    fn count_state(&self, model: &str, states: &[InstanceState]) -> u32 {
        self.mgr
            .cluster
            .instances
            .values()
            .filter(|i| i.model_id == model && states.contains(&i.state))
            .count() as u32
    }

    fn on_arrival(&mut self, i: usize, t: Millis) -> Result<(), EngineError> {
        let model = self.trace[i].model_id.clone();
        self.trackers.get_mut(&model).expect("tracked").apply(t, 1);
        let views = self.views(&model);
        match self.scaler.route(&model, i as u64, &views) {
            RouteDecision::Instance { id } => self.admit(i, id, t),
            RouteDecision::Enqueued { .. } => self.maybe_scale_up(&model, t)?,
        }
        Ok(())
    }

    fn admit(&mut self, i: usize, id: InstanceId, t: Millis) {
        let r = &self.trace[i];
        let inst = self
            .mgr
            .cluster
            .instances
            .get_mut(&id)
            .expect("routed to live instance");
        inst.inflight.insert(i as u64);
        let wait = t - r.arrival;
        let (mut startup, mut stall, mut waited_for) = (0, 0, None);
        if wait > 0 {
            if let Some(m) = self.meta.get(&id) {
                startup = overlap(r.arrival, t, m.created, m.base_end);
                stall = overlap(r.arrival, t, m.base_end, m.ready);
                if startup + stall > 0 {
                    waited_for = Some(m.kind);
                }
            }
        }
        let prefill = self
            .setup
            .latency
            .prefill_ms(&self.models[&r.model_id], r.input_tokens);
        let st = &mut self.reqs[i];
        st.admitted = Some(t);
        st.instance = Some(id);
        st.startup = startup;
        st.stall = stall;
        st.queue = wait - startup - stall;
        st.prefill = prefill;
        st.waited_for = waited_for;
        self.q
            .push(t + prefill, EventKind::PrefillDone { request: i });
    }

    fn on_prefill_done(&mut self, i: usize, t: Millis) {
        let r = &self.trace[i];
        let id = self.reqs[i].instance.expect("admitted");
        let inflight = self.mgr.cluster.instances[&id].inflight.len();
        let per_token = self
            .setup
            .latency
            .decode_ms_per_token(&self.models[&r.model_id], inflight);
        let rest = r.output_tokens.saturating_sub(1);
        let decode = (per_token * rest as f64).ceil() as Millis;
        let st = &mut self.reqs[i];
        st.first_token = Some(t);
        st.tpot = Some(if rest > 0 {
            decode as f64 / rest as f64
        } else {
            per_token
        });
        self.q
            .push(t + decode, EventKind::RequestDone { request: i });
    }

    fn on_request_done(&mut self, i: usize, t: Millis) -> Result<(), EngineError> {
        let model = self.trace[i].model_id.clone();
        self.reqs[i].done = Some(t);
        self.trackers.get_mut(&model).expect("tracked").apply(t, -1);
        let id = self.reqs[i].instance.expect("admitted");
        let inst = self
            .mgr
            .cluster
            .instances
            .get_mut(&id)
            .expect("live instance");
        inst.inflight.remove(&(i as u64));
        match inst.state {
            InstanceState::Active => self.dispatch_queue(&model, t),
            InstanceState::Grace => {
                if self.policy == Policy::Warmserve {
                    let used = self.kv_footprint(id);
                    let freed = self.mgr.reclaim(id, used, t)?;
                    if freed > 0 {
                        self.decisions.push(Decision::Reclaim {
                            time: t,
                            instance: id,
                            freed_bytes: freed,
                        });
                        self.replan(t, "reclaim");
                    }
                }
                if self.mgr.cluster.instances[&id].inflight.is_empty() {
                    self.release(id, t)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Final per-GPU KV footprint of an instance's inflight requests, so a
    /// shrunk reservation never has to grow back.
    fn kv_footprint(&self, id: InstanceId) -> f64 {
        let inst = &self.mgr.cluster.instances[&id];
        let per_token = self.models[&inst.model_id].kv_bytes_per_token_per_gpu();
        inst.inflight
            .iter()
            .map(|&r| {
                let req = &self.trace[r as usize];
                (req.input_tokens as f64 + req.output_tokens as f64) * per_token
            })
            .sum()
    }

    fn dispatch_queue(&mut self, model: &str, t: Millis) {
        loop {
            let views = self.views(model);
            match self.scaler.dispatch_next(model, &views) {
                Some((r, id)) => self.admit(r as usize, id, t),
                None => break,
            }
        }
    }

    fn maybe_scale_up(&mut self, model: &str, t: Millis) -> Result<(), EngineError> {
        loop {
            let batch = self.spec(model).max_batch;
            let starting = self.count_state(model, &[InstanceState::Starting]);
            if !self.scaler.needs_scale_up(model, starting, batch) {
                return Ok(());
            }
            match self.mgr.scale_up(model, t)? {
                Some(up) => {
                    self.starving.remove(model);
                    let invalidated = !up.victims.is_empty();
                    self.on_scale_up(up, t);
                    if invalidated {
                        self.replan(t, "invalidate");
                    }
                }
                None => {
                    self.starved_events += 1;
                    if self.starving.insert(model.to_string()) {
                        let queued = self.scaler.queue_len(model);
                        self.decisions.push(Decision::Starved {
                            time: t,
                            model: model.to_string(),
                            queued,
                        });
                    }
                    return Ok(());
                }
            }
        }
    }

    fn on_scale_up(&mut self, up: ScaleUp, t: Millis) {
        let s = &up.promotion.startup;
        let total = s.total_ms().ceil() as Millis;
        let base = (s.base_ms.ceil() as Millis).min(total);
        let ready = t + total;
        self.meta.insert(
            up.instance,
            InstMeta {
                created: t,
                base_end: t + base,
                ready,
                kind: s.kind,
            },
        );
        self.q.push(
            ready,
            EventKind::LoadDone {
                instance: up.instance,
            },
        );
        self.q.push(
            up.promotion.kv_mapped_at.ceil().max(t as f64) as Millis,
            EventKind::MapDone {
                instance: up.instance,
            },
        );
        let record = ScaleUpRecord {
            time: t,
            model: up.model_id.clone(),
            instance: up.instance,
            gpus: up.gpus.clone(),
            kind: s.kind,
            warm: up.consumed.is_some(),
            consumed: up.consumed,
            consumed_status: up.consumed_status,
            victims: up.victims.clone(),
            startup_ms: total,
        };
        if t >= self.setup.sim.warmup_ms {
            self.scale_ups.push(record.clone());
        }
        self.decisions.push(Decision::ScaleUp(record));
    }

    fn on_instance_ready(&mut self, id: InstanceId, t: Millis) -> Result<(), EngineError> {
        self.mgr.cluster.mark_active(id, t)?;
        let model = self.mgr.cluster.instances[&id].model_id.clone();
        self.dispatch_queue(&model, t);
        self.maybe_scale_up(&model, t)
    }

    fn release(&mut self, id: InstanceId, t: Millis) -> Result<(), EngineError> {
        let Some(inst) = self.mgr.cluster.instances.get(&id) else {
            return Ok(());
        };
        if inst.state != InstanceState::Grace {
            return Ok(());
        }
        let model = inst.model_id.clone();
        let retained = self.mgr.release(id, t, self.policy != Policy::NoPrewarm)?;
        self.mgr.cluster.instances.remove(&id);
        self.meta.remove(&id);
        self.decisions.push(Decision::Release {
            time: t,
            model,
            instance: id,
            retained,
        });
        self.replan(t, "release");
        self.retry_starved(t)
    }

    /// Retries queued models, the one waiting longest first. Trace indices
    /// follow arrival order, so the smallest queue head is the oldest.
    fn retry_starved(&mut self, t: Millis) -> Result<(), EngineError> {
        let mut models = self.scaler.models_with_queue();
        models.sort_by_key(|m| self.scaler.queued(m).next().copied());
        for m in models {
            self.maybe_scale_up(&m, t)?;
        }
        Ok(())
    }

    fn on_tick(&mut self, t: Millis) -> Result<(), EngineError> {
        let mut graced = false;
        let models: Vec<String> = self.models.keys().cloned().collect();
        for m in &models {
            let views = self.views(m);
            for id in self.scaler.scale_down_check(m, &views) {
                self.mgr.cluster.enter_grace(id, t)?;
                self.decisions.push(Decision::ScaleDown {
                    time: t,
                    model: m.clone(),
                    instance: id,
                });
                graced = true;
                if self.mgr.cluster.instances[&id].inflight.is_empty() {
                    self.q.push(t, EventKind::GraceRelease { instance: id });
                }
            }
        }
        if graced {
            self.replan(t, "grace");
        }
        self.retry_starved(t)?;
        let next = t + self.setup.scaling.check_interval_ms;
        if next <= self.end {
            self.q.push(next, EventKind::ScalerTick);
        }
        Ok(())
    }

    fn on_window(&mut self, w: u64, t: Millis) -> Result<(), EngineError> {
        let (day, win) = self.grid.split(w - 1);
        let models: Vec<String> = self.models.keys().cloned().collect();
        for m in &models {
            let (avg, peak) = self.trackers.get_mut(m).expect("tracked").close_window(t);
            let (pa, pp) = self.predictors.get_mut(m).expect("predictor per model");
            pa.observe_value(day, win, avg)?;
            pp.observe_value(day, win, peak as f64)?;
            if let Some((pw, pred_avg, pred_peak)) = self.pending.remove(m) {
                if pw == w - 1 {
                    self.predictions.push(PredictionRecord {
                        model: m.clone(),
                        day,
                        window: win,
                        predicted_avg: pred_avg,
                        actual_avg: avg,
                        predicted_peak: pred_peak,
                        actual_peak: peak as f64,
                    });
                }
            }
        }
        let (nday, nwin) = self.grid.split(w);
        for m in &models {
            let (pa, pp) = &self.predictors[m];
            match (pa.predict(nday, nwin), pp.predict(nday, nwin)) {
                (Ok(a), Ok(p)) => {
                    self.pending
                        .insert(m.clone(), (w, a.predicted, p.predicted));
                    self.demand
                        .insert(m.clone(), (a.predicted, p.predicted.max(a.predicted)));
                }
                _ => {
                    self.demand.remove(m);
                }
            }
        }
        self.replan(t, "window");
        let next = t + self.setup.window_ms;
        if next <= self.end {
            self.q
                .push(next, EventKind::WindowBoundary { window: w + 1 });
        }
        Ok(())
    }

    fn replan(&mut self, t: Millis, trigger: &str) {
        if self.policy != Policy::Warmserve {
            return;
        }
        let demands: Vec<ModelDemand> = self
            .demand
            .iter()
            .map(|(m, &(avg, peak))| ModelDemand {
                model_id: m.clone(),
                instances: self.count_state(m, &[InstanceState::Starting, InstanceState::Active]),
                avg,
                peak,
            })
            .collect();
        let out = self.mgr.plan(&demands, t);
        self.skipped += out.skipped.len() as u64;
        if out.placed.is_empty()
            && out.skipped.is_empty()
            && out.invalidated.is_empty()
            && trigger != "window"
        {
            return;
        }
        let placed = out
            .placed
            .iter()
            .map(|(id, gpus, cat, score)| PlacedEntry {
                replica: *id,
                model: self
                    .mgr
                    .replicas
                    .get(id)
                    .map(|r| r.model_id.clone())
                    .unwrap_or_default(),
                gpus: gpus.clone(),
                category: *cat,
                score: *score,
            })
            .collect();
        self.decisions.push(Decision::Plan {
            time: t,
            trigger: trigger.to_string(),
            demands,
            placed,
            skipped: out.skipped,
            invalidated: out.invalidated,
        });
    }

    fn check(&mut self, t: Millis) {
        let mut found = self.mgr.check_invariants();
        for m in self.scaler.models_with_queue() {
            if autoscaler::pick_instance(&self.views(&m), None).is_some() {
                found.push(format!(
                    "model {m}: request queued while an instance has spare batch capacity"
                ));
            }
        }
        for v in found {
            if self.violations.len() < 10_000 && !self.violations.contains(&v) {
                log::warn!("t={t}: invariant violation: {v}");
                self.violations.insert(v);
            }
        }
    }

    fn finish(mut self, seed: u64) -> RunOutput {
        let warmup = self.setup.sim.warmup_ms;
        let records: Vec<RequestRecord> = self
            .trace
            .iter()
            .zip(&self.reqs)
            .map(|(r, s)| RequestRecord {
                id: r.id,
                model: r.model_id.clone(),
                arrival: r.arrival,
                admitted: s.admitted,
                first_token: s.first_token,
                done: s.done,
                instance: s.instance,
                ttft_ms: s.first_token.map(|f| f - r.arrival),
                tpot_ms: s.done.and(s.tpot),
                queue_ms: s.queue,
                startup_ms: s.startup,
                load_stall_ms: s.stall,
                prefill_ms: s.prefill,
                waited_for: s.waited_for,
                in_warmup: r.arrival < warmup,
            })
            .collect();
        let grouped = metrics::by_model(&records);
        let mut summaries = Vec::new();
        for m in self.models.keys() {
            let recs = grouped.get(m.as_str()).cloned().unwrap_or_default();
            let ups: Vec<&ScaleUpRecord> =
                self.scale_ups.iter().filter(|s| &s.model == m).collect();
            let preds: Vec<&PredictionRecord> =
                self.predictions.iter().filter(|p| &p.model == m).collect();
            summaries.push(metrics::summarize(m, &recs, &ups, &preds));
        }
        let all: Vec<&RequestRecord> = records.iter().collect();
        let ups: Vec<&ScaleUpRecord> = self.scale_ups.iter().collect();
        let preds: Vec<&PredictionRecord> = self.predictions.iter().collect();
        let overall = metrics::summarize("all", &all, &ups, &preds);
        let counters = self.mgr.counters;
        let violation_count = self.violations.len() as u64 + self.q.causality_violations;
        let transitions = std::mem::take(&mut self.mgr.cluster.transitions);
        let report = MetricsReport {
            schema_version: 1,
            policy: self.policy.name().to_string(),
            seed,
            trace_hash: trace::trace_hash(self.trace),
            config: serde_json::to_value(self.setup).unwrap_or(serde_json::Value::Null),
            sim_end_ms: self.end,
            events_processed: self.events,
            hit_ratio: overall.hit_ratio,
            overall,
            models: summaries,
            role_occupancy: metrics::role_occupancy(
                self.mgr.cluster.gpu_count(),
                &transitions,
                self.end,
            ),
            replicas: metrics::ReplicaSummary {
                placed: counters.placed,
                consumed: counters.consumed,
                invalidated: counters.invalidated,
                retained: counters.retained,
                skipped: self.skipped,
            },
            capacity_starved_events: self.starved_events,
            invariant_violations: violation_count,
            violation_samples: self.violations.iter().take(20).cloned().collect(),
        };
        RunOutput {
            report,
            requests: records,
            decisions: self.decisions,
            transitions,
            predictions: self.predictions,
            scale_ups: self.scale_ups,
        }
    }
}
