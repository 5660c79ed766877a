//! Global manager: owns the cluster and the prewarmed-replica registry,
//! turns per-model demand into placements, and serves scale-ups.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::cluster::{
    Cluster, ClusterError, GpuId, InstanceId, InstanceState, Promotion, ReplicaId, Role, SlotLoad,
};
use crate::placement::{
    self, Category, ExistingReplica, GpuSnapshot, PlacementParams, PlacementPlan, PlacementRequest,
    Replica, ReplicaStatus, Skip, Snapshot, OPPORTUNISTIC_SCORE,
};
use crate::Millis;

/// Predicted demand for one model at planning time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDemand {
    pub model_id: String,
    /// Active plus starting instances.
    pub instances: u32,
    pub avg: f64,
    pub peak: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct PlanOutcome {
    pub placed: Vec<(ReplicaId, Vec<GpuId>, Category, f64)>,
    pub skipped: Vec<Skip>,
    pub invalidated: Vec<ReplicaId>,
    #[serde(skip)]
    pub loads: Vec<SlotLoad>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleUp {
    pub instance: InstanceId,
    pub model_id: String,
    pub gpus: Vec<GpuId>,
    pub consumed: Option<ReplicaId>,
    pub consumed_status: Option<ReplicaStatus>,
    pub victims: Vec<ReplicaId>,
    pub victim_score: f64,
    #[serde(skip)]
    pub promotion: Promotion,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ReplicaCounters {
    pub placed: u64,
    pub consumed: u64,
    pub invalidated: u64,
    pub retained: u64,
}

#[derive(Debug, Clone)]
pub struct Manager {
    pub cluster: Cluster,
    pub params: PlacementParams,
    pub replicas: BTreeMap<ReplicaId, Replica>,
    next_replica: ReplicaId,
    pub counters: ReplicaCounters,
}

impl Manager {
    pub fn new(cluster: Cluster, params: PlacementParams) -> Self {
        Self {
            cluster,
            params,
            replicas: BTreeMap::new(),
            next_replica: 0,
            counters: ReplicaCounters::default(),
        }
    }

    /// Loading or Ready, derived from slot progress at `now`.
    pub fn status(&self, id: ReplicaId, now: Millis) -> Option<ReplicaStatus> {
        let r = self.replicas.get(&id)?;
        let ready = r.gpu_group.iter().all(|&g| {
            self.cluster.workers[g]
                .slot_for(&r.model_id)
                .is_some_and(|s| s.ready_at() <= now as f64)
        });
        Some(if ready {
            ReplicaStatus::Ready
        } else {
            ReplicaStatus::Loading
        })
    }

    fn existing(&self) -> Vec<ExistingReplica> {
        self.replicas
            .values()
            .map(|r| ExistingReplica {
                id: r.id,
                model_id: r.model_id.clone(),
                score: r.score,
                group: r.gpu_group.clone(),
            })
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        let gpus = self
            .cluster
            .workers
            .iter()
            .map(|w| GpuSnapshot {
                gpu: w.gpu_id,
                server: w.server_id,
                eligible: matches!(
                    w.role,
                    Role::Idle | Role::Universal | Role::DedicatedGrace(_)
                ),
                free_pages: w.free_pages(),
                models: w.slots.iter().map(|s| s.model_id.clone()).collect(),
            })
            .collect();
        let reserved_groups = self
            .cluster
            .instances
            .values()
            .filter(|i| i.state == InstanceState::Grace)
            .map(|i| i.gpus.clone())
            .collect();
        Snapshot {
            gpus,
            existing: self.existing(),
            reserved_groups,
        }
    }

    /// Drops a replica and every slot it owns.
    pub fn invalidate(&mut self, id: ReplicaId, now: Millis) -> bool {
        let Some(r) = self.replicas.remove(&id) else {
            return false;
        };
        for &g in &r.gpu_group {
            let sid = self.cluster.workers[g]
                .slots
                .iter()
                .find(|s| s.replica == Some(id) && !s.active)
                .map(|s| s.slot_id);
            if let Some(sid) = sid {
                self.cluster.evict_slot(g, sid, now);
            }
        }
        self.counters.invalidated += 1;
        true
    }

    fn invalidate_all(
        &mut self,
        ids: impl IntoIterator<Item = ReplicaId>,
        now: Millis,
        out: &mut Vec<ReplicaId>,
    ) {
        for id in ids {
            if self.invalidate(id, now) {
                out.push(id);
            }
        }
    }

    /// Cold-start latency used to scale prewarm scores.
    pub fn cold_start_ms(&self, model: &str) -> f64 {
        let spec = &self.cluster.models[model];
        self.cluster.costs.warm_start_ms
            + self.cluster.costs.cold_extra_ms
            + spec.cold_load_latency(&self.cluster.link)
    }

    /// Sizes and scores the replicas each model needs, re-ranks existing
    /// replicas against that need, and prewarms the shortfall.
    pub fn plan(&mut self, demands: &[ModelDemand], now: Millis) -> PlanOutcome {
        let mut out = PlanOutcome::default();
        let mut wanted: BTreeSet<ReplicaId> = BTreeSet::new();
        let mut requests = Vec::new();
        for d in demands {
            let Some(spec) = self.cluster.models.get(&d.model_id) else {
                continue;
            };
            let (d_gpus, batch) = (spec.parallelism as usize, spec.max_batch);
            let pages = spec.partition_pages(self.cluster.page_size());
            let peak = d.peak.max(d.avg);
            let (nb, nu) = placement::replica_counts(d.instances, batch, d.avg, peak);
            let t_cold = self.cold_start_ms(&d.model_id);
            let cap = self.params.burstiness_cap;
            let desired: Vec<(Category, u32, f64)> = (0..nb)
                .map(|i| {
                    (
                        Category::Basic,
                        i,
                        placement::prewarm_score(
                            Category::Basic,
                            i,
                            nb,
                            nu,
                            t_cold,
                            d.avg,
                            peak,
                            cap,
                        ),
                    )
                })
                .chain((0..nu).map(|i| {
                    (
                        Category::Burst,
                        i,
                        placement::prewarm_score(
                            Category::Burst,
                            i,
                            nb,
                            nu,
                            t_cold,
                            d.avg,
                            peak,
                            cap,
                        ),
                    )
                }))
                .collect();
            let mut mine: Vec<ReplicaId> = self
                .replicas
                .values()
                .filter(|r| r.model_id == d.model_id)
                .map(|r| r.id)
                .collect();
            mine.sort_by_key(|&id| (self.status(id, now) != Some(ReplicaStatus::Ready), id));
            let mut existing = mine.into_iter();
            for (cat, rank, score) in desired {
                // A zero-score burst replica is not worth memory.
                if score <= 0.0 {
                    continue;
                }
                match existing.next() {
                    Some(id) => {
                        let r = self.replicas.get_mut(&id).expect("listed above");
                        r.category = cat;
                        r.rank = rank;
                        r.score = score;
                        wanted.insert(id);
                    }
                    None => requests.push(PlacementRequest {
                        model_id: d.model_id.clone(),
                        category: cat,
                        rank,
                        score,
                        gpus: d_gpus,
                        pages,
                    }),
                }
            }
        }
        for r in self.replicas.values_mut() {
            if !wanted.contains(&r.id) {
                r.category = Category::Opportunistic;
                r.score = OPPORTUNISTIC_SCORE;
            }
        }
        placement::sort_requests(&mut requests);

        let mut pending = requests;
        loop {
            let plan = placement::plan_placement(&pending, &self.snapshot(), &self.params);
            let PlacementPlan {
                assignments,
                skipped,
            } = plan;
            for a in assignments {
                if let Some(id) = self.materialize(&a.request, &a.group, now, &mut out.loads) {
                    out.placed
                        .push((id, a.group.clone(), a.request.category, a.request.score));
                }
            }
            if skipped.is_empty() {
                break;
            }
            // Make room by dropping one unwanted replica, oldest first, then retry.
            let spare = self
                .replicas
                .values()
                .find(|r| r.category == Category::Opportunistic)
                .map(|r| r.id);
            let Some(spare) = spare else {
                out.skipped = skipped;
                break;
            };
            self.invalidate_all([spare], now, &mut out.invalidated);
            pending = skipped.into_iter().map(|s| s.request).collect();
        }
        out
    }

    fn materialize(
        &mut self,
        req: &PlacementRequest,
        group: &[GpuId],
        now: Millis,
        loads: &mut Vec<SlotLoad>,
    ) -> Option<ReplicaId> {
        let id = self.next_replica;
        let mut done = Vec::new();
        for &g in group {
            match self.cluster.begin_prewarm(g, &req.model_id, req.pages, now) {
                Ok(load) => done.push(load),
                Err(e) => {
                    log::warn!("prewarm of {} on gpu {g} failed: {e}", req.model_id);
                    for l in done {
                        self.cluster.evict_slot(l.gpu, l.slot_id, now);
                    }
                    return None;
                }
            }
        }
        self.next_replica += 1;
        for l in &done {
            let w = &mut self.cluster.workers[l.gpu];
            if let Some(s) = w.slots.iter_mut().find(|s| s.slot_id == l.slot_id) {
                s.replica = Some(id);
            }
        }
        loads.extend(done);
        self.replicas.insert(
            id,
            Replica {
                id,
                model_id: req.model_id.clone(),
                category: req.category,
                rank: req.rank,
                score: req.score,
                gpu_group: group.to_vec(),
                status: ReplicaStatus::Loading,
            },
        );
        self.counters.placed += 1;
        Some(id)
    }

    /// Launches an instance of `model`, preferring a prewarmed replica
    /// (Ready before Loading) and otherwise a cold group of idle or universal
    /// GPUs; either way the group whose victims score lowest wins.
    pub fn scale_up(&mut self, model: &str, now: Millis) -> Result<Option<ScaleUp>, ClusterError> {
        let spec = self.cluster.model(model)?.clone();
        let d = spec.parallelism as usize;
        let existing = self.existing();
        let usable =
            |g: &GpuId| matches!(self.cluster.workers[*g].role, Role::Idle | Role::Universal);

        let mut ready = Vec::new();
        let mut loading = Vec::new();
        for r in self.replicas.values().filter(|r| r.model_id == model) {
            if !r.gpu_group.iter().all(usable) {
                continue;
            }
            match self.status(r.id, now) {
                Some(ReplicaStatus::Ready) => ready.push((r.gpu_group.clone(), Some(r.id))),
                _ => loading.push((r.gpu_group.clone(), Some(r.id))),
            }
        }
        let pool = if !ready.is_empty() { ready } else { loading };
        let choice = if !pool.is_empty() {
            placement::select_min_victim_group(&pool, &existing)
                .map(|(i, v, s)| (pool[i].clone(), v, s))
        } else {
            let per_server = self.cluster.topology.gpus_per_server;
            let by_server: Vec<Vec<GpuId>> = (0..self.cluster.topology.servers)
                .map(|s| {
                    (s * per_server..(s + 1) * per_server)
                        .filter(usable)
                        .collect()
                })
                .collect();
            let cands: Vec<(Vec<GpuId>, Option<ReplicaId>)> =
                placement::enumerate_groups(&by_server, d, &self.params, |_| true)
                    .into_iter()
                    .map(|g| (g, None))
                    .collect();
            placement::select_min_victim_group(&cands, &existing)
                .map(|(i, v, s)| (cands[i].clone(), v, s))
        };
        let Some(((group, consumed), victims, victim_score)) = choice else {
            return Ok(None);
        };

        let consumed_status = consumed.and_then(|id| self.status(id, now));
        let mut gone = Vec::new();
        self.invalidate_all(victims.iter().copied(), now, &mut gone);
        let promotion = self.cluster.promote_to_dedicated(&group, model, now)?;
        if let Some(id) = consumed {
            self.replicas.remove(&id);
            self.counters.consumed += 1;
        }
        // Slots evicted during promotion belong to replicas that are now broken.
        let mut extra = Vec::new();
        self.invalidate_all(promotion.evicted_replicas.iter().copied(), now, &mut extra);
        gone.extend(extra);
        Ok(Some(ScaleUp {
            instance: promotion.instance,
            model_id: model.to_string(),
            gpus: group,
            consumed,
            consumed_status,
            victims: gone,
            victim_score,
            promotion,
        }))
    }

    /// Releases a drained grace instance. With `retain`, the served model's
    /// slots stay behind as an opportunistic replica.
    pub fn release(
        &mut self,
        id: InstanceId,
        now: Millis,
        retain: bool,
    ) -> Result<Option<ReplicaId>, ClusterError> {
        let model = self
            .cluster
            .instances
            .get(&id)
            .ok_or(ClusterError::UnknownInstance(id))?
            .model_id
            .clone();
        let kept = self.cluster.release_instance(id, now, retain)?;
        if kept.is_empty() {
            return Ok(None);
        }
        let rid = self.next_replica;
        self.next_replica += 1;
        let mut group = Vec::new();
        for (g, sid) in kept {
            if let Some(s) = self.cluster.workers[g]
                .slots
                .iter_mut()
                .find(|s| s.slot_id == sid)
            {
                s.replica = Some(rid);
            }
            group.push(g);
        }
        self.replicas.insert(
            rid,
            Replica {
                id: rid,
                model_id: model,
                category: Category::Opportunistic,
                rank: 0,
                score: OPPORTUNISTIC_SCORE,
                gpu_group: group,
                status: ReplicaStatus::Ready,
            },
        );
        self.counters.retained += 1;
        Ok(Some(rid))
    }

    /// Shrinks each GPU of a grace instance to its reservation target.
    pub fn reclaim(
        &mut self,
        id: InstanceId,
        kv_used_per_gpu: f64,
        now: Millis,
    ) -> Result<u64, ClusterError> {
        let gpus = self
            .cluster
            .instances
            .get(&id)
            .ok_or(ClusterError::UnknownInstance(id))?
            .gpus
            .clone();
        let mut freed = 0;
        for g in gpus {
            freed += self
                .cluster
                .reclaim_on_completion(id, g, kv_used_per_gpu, now)?;
        }
        Ok(freed)
    }

    /// Regrows KV on a grace GPU, invalidating replicas whose slots had to go.
    pub fn ensure_kv(&mut self, gpu: GpuId, kv_used_bytes: f64, now: Millis) -> Vec<ReplicaId> {
        let evicted = self.cluster.ensure_kv(gpu, kv_used_bytes, now);
        let mut out = Vec::new();
        self.invalidate_all(evicted, now, &mut out);
        out
    }

    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = self.cluster.check_invariants();
        let groups: Vec<(ReplicaId, &Vec<GpuId>)> = self
            .replicas
            .values()
            .map(|r| (r.id, &r.gpu_group))
            .collect();
        for (i, (a, ga)) in groups.iter().enumerate() {
            for (b, gb) in &groups[i + 1..] {
                if !placement::validate_group(ga, [gb.as_slice()]) {
                    out.push(format!(
                        "replicas {a} {ga:?} and {b} {gb:?} partially overlap"
                    ));
                }
            }
        }
        for r in self.replicas.values() {
            if r.gpu_group
                .iter()
                .any(|&g| self.cluster.server_of(g) != self.cluster.server_of(r.gpu_group[0]))
            {
                out.push(format!("replica {} spans servers", r.id));
            }
            for &g in &r.gpu_group {
                let ok = self.cluster.workers[g]
                    .slots
                    .iter()
                    .any(|s| s.replica == Some(r.id) && s.model_id == r.model_id);
                if !ok {
                    out.push(format!("replica {} missing slot on gpu {g}", r.id));
                }
            }
            if r.score <= 0.0 {
                out.push(format!("replica {} has non-positive score", r.id));
            }
        }
        for w in &self.cluster.workers {
            for s in &w.slots {
                if let Some(rid) = s.replica {
                    if !self.replicas.contains_key(&rid) {
                        out.push(format!(
                            "gpu {} slot {} points at dead replica {rid}",
                            w.gpu_id, s.slot_id
                        ));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ModelSpec, StartKind, StartupCosts, Topology};
    use crate::memswitch::LinkParams;

    fn spec(id: &str, d: u32) -> ModelSpec {
        ModelSpec {
            id: id.into(),
            weight_bytes: (d as u64) << 30,
            parallelism: d,
            max_batch: 4,
            layers: 4,
            layer_compute_ms: 1.0,
            prefill_ms_per_token: 0.0,
            prefill_base_ms: 1.0,
            decode_ms_per_token: 1.0,
            kv_bytes_per_token: 1 << 10,
            cold_load_ms: None,
        }
    }

    fn manager(gpus: usize) -> Manager {
        let link = LinkParams {
            bandwidth_bytes_per_ms: (1u64 << 26) as f64,
            map_ms_per_page: 0.0,
            page_size: 2 << 20,
            chunk_pages: 64,
        };
        let c = Cluster::new(
            Topology {
                servers: 1,
                gpus_per_server: gpus,
                pages_per_gpu: 2048,
            },
            link,
            StartupCosts {
                warm_start_ms: 100.0,
                cold_extra_ms: 1000.0,
            },
            vec![spec("a", 1), spec("b", 1), spec("c", 2)],
        );
        Manager::new(c, PlacementParams::default())
    }

    fn demand(m: &str, avg: f64, peak: f64) -> ModelDemand {
        ModelDemand {
            model_id: m.into(),
            instances: 0,
            avg,
            peak,
        }
    }

    #[test]
    fn plan_then_warm_scale_up() {
        let mut m = manager(2);
        let out = m.plan(&[demand("a", 3.0, 3.0)], 0);
        assert_eq!(out.placed.len(), 1);
        assert!(out.skipped.is_empty());
        let up = m.scale_up("a", 1_000).unwrap().unwrap();
        assert_eq!(up.consumed, Some(out.placed[0].0));
        assert_eq!(up.promotion.startup.kind, StartKind::Warm);
        assert!(m.replicas.is_empty());
        assert!(m.check_invariants().is_empty());
    }

    #[test]
    fn cold_scale_up_avoids_expensive_victims() {
        let mut m = manager(2);
        m.plan(&[demand("a", 3.0, 3.0)], 0);
        let up = m.scale_up("b", 1_000).unwrap().unwrap();
        assert!(up.victims.is_empty());
        assert_eq!(up.promotion.startup.kind, StartKind::Cold);
        assert_eq!(m.replicas.len(), 1);
        assert!(m.check_invariants().is_empty());
    }

    #[test]
    fn scale_up_evicts_whole_replica() {
        let mut m = manager(2);
        m.plan(&[demand("c", 3.0, 3.0)], 0);
        m.cluster.promote_to_dedicated(&[1], "b", 10).unwrap();
        // GPU 1 was part of the 2-GPU replica; its slot there is gone.
        let inv = m.check_invariants();
        assert!(!inv.is_empty());
        let mut m = manager(2);
        m.plan(&[demand("c", 3.0, 3.0)], 0);
        let up = m.scale_up("a", 10).unwrap().unwrap();
        assert_eq!(up.victims.len(), 1);
        assert!(m.cluster.workers[1].slots.is_empty());
        assert!(m.check_invariants().is_empty());
    }

    #[test]
    fn release_retains_replica_and_replan_reuses_it() {
        let mut m = manager(1);
        let up = m.scale_up("a", 0).unwrap().unwrap();
        m.cluster.mark_active(up.instance, 10).unwrap();
        m.cluster.enter_grace(up.instance, 20).unwrap();
        let rid = m.release(up.instance, 20, true).unwrap().unwrap();
        assert_eq!(m.status(rid, 20), Some(ReplicaStatus::Ready));
        let out = m.plan(&[demand("a", 1.0, 1.0)], 30);
        assert!(out.placed.is_empty());
        assert_eq!(m.replicas[&rid].category, Category::Basic);
        assert!(m.check_invariants().is_empty());
    }

    #[test]
    fn unwanted_replicas_make_room() {
        let mut m = manager(1);
        let up = m.scale_up("a", 0).unwrap().unwrap();
        m.cluster.mark_active(up.instance, 10).unwrap();
        m.cluster.enter_grace(up.instance, 20).unwrap();
        m.release(up.instance, 20, true).unwrap();
        // 512 of 900 pages held by the retained replica of a; only b is wanted.
        m.cluster.workers[0].total_pages = 900;
        let out = m.plan(&[demand("b", 1.0, 1.0)], 30);
        assert_eq!(out.invalidated.len(), 1);
        assert_eq!(out.placed.len(), 1);
        assert!(m.check_invariants().is_empty());
    }

    #[test]
    fn no_resources_means_no_scale_up() {
        let mut m = manager(1);
        m.scale_up("a", 0).unwrap().unwrap();
        assert!(m.scale_up("b", 0).unwrap().is_none());
    }
}
