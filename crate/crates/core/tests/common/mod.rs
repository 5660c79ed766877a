#![allow(dead_code)]

use prewarm_sim::autoscaler::ScalePolicy;
use prewarm_sim::cluster::{Cluster, ModelSpec, StartupCosts, Topology};
use prewarm_sim::engine::{EngineSetup, LatencyModel, SimParams};
use prewarm_sim::manager::Manager;
use prewarm_sim::memswitch::LinkParams;
use prewarm_sim::placement::PlacementParams;
use prewarm_sim::predictor::WeightOrientation;
use prewarm_sim::trace::Request;
use prewarm_sim::Millis;

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

pub fn model(id: &str, parallelism: u32, weight_gib: u64) -> ModelSpec {
    ModelSpec {
        id: id.into(),
        weight_bytes: weight_gib * GIB,
        parallelism,
        max_batch: 4,
        layers: 8,
        layer_compute_ms: 2.0,
        prefill_ms_per_token: 0.1,
        prefill_base_ms: 10.0,
        decode_ms_per_token: 20.0,
        kv_bytes_per_token: 1 << 16,
        cold_load_ms: None,
    }
}

/// 2^25 bytes/ms with 2 MiB pages: one 64-page chunk transfers in 4 ms.
pub fn link(map_ms_per_page: f64) -> LinkParams {
    LinkParams {
        bandwidth_bytes_per_ms: (1u64 << 25) as f64,
        map_ms_per_page,
        page_size: 2 * MIB,
        chunk_pages: 64,
    }
}

pub fn setup(servers: usize, gpus_per_server: usize, models: Vec<ModelSpec>) -> EngineSetup {
    EngineSetup {
        topology: Topology {
            servers,
            gpus_per_server,
            pages_per_gpu: 8192,
        },
        link: link(0.0),
        latency: LatencyModel {
            warm_start_ms: 500.0,
            cold_extra_ms: 5_000.0,
            batch_slowdown: 0.0,
        },
        models,
        window_ms: 60_000,
        day_ms: 600_000,
        seasonal_days: 2,
        lookback: 3,
        orientation: WeightOrientation::RecentHeaviest,
        placement: PlacementParams::default(),
        scaling: ScalePolicy::default(),
        sim: SimParams::default(),
    }
}

pub fn manager(
    servers: usize,
    gpus_per_server: usize,
    pages: u64,
    models: Vec<ModelSpec>,
) -> Manager {
    let cluster = Cluster::new(
        Topology {
            servers,
            gpus_per_server,
            pages_per_gpu: pages,
        },
        link(0.0),
        StartupCosts {
            warm_start_ms: 500.0,
            cold_extra_ms: 5_000.0,
        },
        models,
    );
    Manager::new(cluster, PlacementParams::default())
}

pub fn req(id: u64, model: &str, arrival: Millis, input: u32, output: u32) -> Request {
    Request {
        id,
        model_id: model.into(),
        arrival,
        input_tokens: input,
        output_tokens: output,
    }
}

pub fn example_config_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml")
}

pub mod lifecycle {
    //! Random plan/promote/grace/reclaim/release sequences with checks that do
    //! not rely on the library's own invariant code.

    use std::collections::BTreeMap;

    use prewarm_sim::cluster::{GpuId, InstanceState, Role};
    use prewarm_sim::manager::{Manager, ModelDemand};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{manager, model};

    fn legal(from: Role, to: Role) -> bool {
        use Role::*;
        match (from, to) {
            (Idle, Universal)
            | (Universal, Idle)
            | (Universal, Dedicated(_))
            | (Idle, Dedicated(_)) => true,
            (Dedicated(a), DedicatedGrace(b)) => a == b,
            (DedicatedGrace(_), Universal) => true,
            _ => false,
        }
    }

    fn partial_overlap(a: &[GpuId], b: &[GpuId]) -> bool {
        let inter = a.iter().filter(|g| b.contains(g)).count();
        inter > 0 && inter < a.len() && inter < b.len()
    }

    pub struct Checker {
        roles: Vec<Role>,
        seen_transitions: usize,
    }

    impl Checker {
        pub fn new(m: &Manager) -> Self {
            Self {
                roles: m.cluster.workers.iter().map(|w| w.role).collect(),
                seen_transitions: 0,
            }
        }

        /// Returns every violation found since the previous call.
        pub fn check(&mut self, m: &Manager) -> Vec<String> {
            let mut out = Vec::new();
            let reps: Vec<_> = m.replicas.values().collect();
            for (i, a) in reps.iter().enumerate() {
                for b in &reps[i + 1..] {
                    if partial_overlap(&a.gpu_group, &b.gpu_group) {
                        out.push(format!(
                            "partial overlap {:?} {:?}",
                            a.gpu_group, b.gpu_group
                        ));
                    }
                }
            }
            for w in &m.cluster.workers {
                let slots: u64 = w.slots.iter().map(|s| s.mapped_pages).sum();
                let used = slots + w.kv_pages_mapped;
                if used > w.total_pages || w.free_pages() != w.total_pages - used {
                    out.push(format!(
                        "gpu {}: pages {} + {} of {}",
                        w.gpu_id, slots, w.kv_pages_mapped, w.total_pages
                    ));
                }
                if w.kv_pages_used > w.kv_pages_mapped && !matches!(w.role, Role::DedicatedGrace(_))
                {
                    out.push(format!("gpu {}: kv used above mapped", w.gpu_id));
                }
            }
            for t in &m.cluster.transitions[self.seen_transitions..] {
                if self.roles[t.gpu] != t.from {
                    out.push(format!(
                        "gpu {}: transition from {:?} but was {:?}",
                        t.gpu, t.from, self.roles[t.gpu]
                    ));
                }
                if !legal(t.from, t.to) {
                    out.push(format!("gpu {}: illegal {:?} -> {:?}", t.gpu, t.from, t.to));
                }
                self.roles[t.gpu] = t.to;
            }
            self.seen_transitions = m.cluster.transitions.len();
            for (g, w) in m.cluster.workers.iter().enumerate() {
                if self.roles[g] != w.role {
                    out.push(format!("gpu {g}: role changed without a transition record"));
                }
            }
            out.extend(m.check_invariants());
            out
        }
    }

    /// Runs `events` random control-plane events on a random cluster of
    /// 2..=16 GPUs; returns `(events, violations)`.
    pub fn random_sequence(seed: u64, events: usize) -> (usize, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (servers, per) = loop {
            let s = rng.random_range(1..=2usize);
            let p = rng.random_range(1..=8usize);
            if (2..=16).contains(&(s * p)) {
                break (s, p);
            }
        };
        let mut models = vec![model("a", 1, 2), model("b", 1, 3)];
        if per >= 2 {
            models.push(model("c", 2, 4));
        }
        if per >= 4 {
            models.push(model("d", 4, 8));
        }
        // 2..=6 partitions of the smallest model fit on a GPU.
        let pages = rng.random_range(2_048..6_200);
        let mut m = manager(servers, per, pages, models.clone());
        let mut checker = Checker::new(&m);
        let mut violations = checker.check(&m);
        let mut now = 0u64;
        let mut next_req = 0u64;
        for _ in 0..events {
            now += rng.random_range(0..2_000);
            let ids: Vec<_> = m.cluster.instances.keys().copied().collect();
            let pick_state = |m: &Manager, st: InstanceState, rng: &mut ChaCha8Rng| {
                let c: Vec<_> = ids
                    .iter()
                    .copied()
                    .filter(|i| m.cluster.instances[i].state == st)
                    .collect();
                (!c.is_empty()).then(|| c[rng.random_range(0..c.len())])
            };
            match rng.random_range(0..8) {
                0 | 1 => {
                    let counts: BTreeMap<&str, u32> = models
                        .iter()
                        .map(|s| {
                            let k = m.cluster.instances.values().filter(|i| {
                                i.model_id == s.id
                                    && matches!(
                                        i.state,
                                        InstanceState::Starting | InstanceState::Active
                                    )
                            });
                            (s.id.as_str(), k.count() as u32)
                        })
                        .collect();
                    let mut demands = Vec::new();
                    for s in &models {
                        if !rng.random_bool(0.8) {
                            continue;
                        }
                        let avg = rng.random_range(0.0..12.0);
                        demands.push(ModelDemand {
                            model_id: s.id.clone(),
                            instances: counts[s.id.as_str()],
                            avg,
                            peak: avg + rng.random_range(0.0..12.0),
                        });
                    }
                    m.plan(&demands, now);
                }
                2 => {
                    let s = &models[rng.random_range(0..models.len())];
                    if let Err(e) = m.scale_up(&s.id, now) {
                        violations.push(format!("scale_up error: {e}"));
                    }
                }
                3 => {
                    if let Some(id) = pick_state(&m, InstanceState::Starting, &mut rng) {
                        m.cluster.mark_active(id, now).unwrap();
                        let n = rng.random_range(0..=m.cluster.instances[&id].batch as u64);
                        for _ in 0..n {
                            m.cluster
                                .instances
                                .get_mut(&id)
                                .unwrap()
                                .inflight
                                .insert(next_req);
                            next_req += 1;
                        }
                    }
                }
                4 => {
                    if let Some(id) = pick_state(&m, InstanceState::Active, &mut rng) {
                        m.cluster.enter_grace(id, now).unwrap();
                    }
                }
                5 | 6 => {
                    if let Some(id) = pick_state(&m, InstanceState::Grace, &mut rng) {
                        let inst = m.cluster.instances.get_mut(&id).unwrap();
                        if let Some(&r) = inst.inflight.iter().next() {
                            inst.inflight.remove(&r);
                        }
                        let cap = inst.kv_capacity_bytes as f64;
                        let used = cap * inst.inflight.len() as f64 / inst.batch as f64
                            * rng.random_range(0.0..1.0);
                        let gpus = inst.gpus.clone();
                        if rng.random_bool(0.2) {
                            m.ensure_kv(gpus[0], used, now);
                        } else if let Err(e) = m.reclaim(id, used, now) {
                            violations.push(format!("reclaim error: {e}"));
                        }
                        if m.cluster.instances[&id].inflight.is_empty() {
                            let retain = rng.random_bool(0.7);
                            match m.release(id, now, retain) {
                                Ok(_) => {
                                    m.cluster.instances.remove(&id);
                                }
                                Err(e) => violations.push(format!("release error: {e}")),
                            }
                        }
                    }
                }
                _ => {
                    let ids: Vec<_> = m.replicas.keys().copied().collect();
                    if !ids.is_empty() && rng.random_bool(0.3) {
                        m.invalidate(ids[rng.random_range(0..ids.len())], now);
                    }
                }
            }
            violations.extend(checker.check(&m));
        }
        (events, violations)
    }
}
