//! Replica sizing, prewarm scoring and evict-aware group selection.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cluster::{GpuId, ReplicaId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Basic,
    Burst,
    /// Left over from a released instance or surplus to current demand.
    Opportunistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaStatus {
    Planned,
    Loading,
    Ready,
    Invalidated,
    Consumed,
}

/// Score given to replicas that no current demand asks for.
pub const OPPORTUNISTIC_SCORE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replica {
    pub id: ReplicaId,
    pub model_id: String,
    pub category: Category,
    pub rank: u32,
    pub score: f64,
    pub gpu_group: Vec<GpuId>,
    pub status: ReplicaStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Enumeration {
    /// Every same-server combination, falling back to contiguous windows
    /// when the count exceeds the configured limit.
    #[default]
    Exhaustive,
    /// Contiguous GPU-id windows first, arbitrary combinations only if none
    /// of them validates.
    ContiguousFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementParams {
    pub burstiness_cap: f64,
    pub enumeration: Enumeration,
    pub exhaustive_limit: usize,
}

impl Default for PlacementParams {
    fn default() -> Self {
        Self {
            burstiness_cap: 10.0,
            enumeration: Enumeration::Exhaustive,
            exhaustive_limit: 20_000,
        }
    }
}

/// `(N_basic, N_burst)` for `k` running instances of batch size `b`.
pub fn replica_counts(k: u32, b: u32, avg: f64, peak: f64) -> (u32, u32) {
    assert!(b >= 1, "batch size must be positive");
    let need = |load: f64| (load / b as f64).ceil().max(0.0) as i64;
    let basic = (need(avg) - k as i64).max(0);
    let burst = (need(peak) - basic - k as i64).max(0);
    (basic as u32, burst as u32)
}

/// Priority of the `rank`-th replica of a category, scaled by the model's
/// cold-start latency `t_cold`.
#[allow(clippy::too_many_arguments)]
pub fn prewarm_score(
    category: Category,
    rank: u32,
    n_basic: u32,
    n_burst: u32,
    t_cold: f64,
    avg: f64,
    peak: f64,
    burstiness_cap: f64,
) -> f64 {
    let n = (n_basic + n_burst).max(1) as f64;
    match category {
        Category::Basic => (-(rank as f64) / n).exp() * t_cold,
        Category::Burst => {
            let factor = if avg > 0.0 {
                (peak - avg) / avg
            } else if peak > 0.0 {
                burstiness_cap
            } else {
                0.0
            };
            (-((n_basic + rank) as f64) / n).exp() * t_cold * factor.min(burstiness_cap)
        }
        Category::Opportunistic => OPPORTUNISTIC_SCORE,
    }
}

fn overlaps(a: &[GpuId], b: &[GpuId]) -> bool {
    a.iter().any(|g| b.contains(g))
}

fn subset(a: &[GpuId], b: &[GpuId]) -> bool {
    a.iter().all(|g| b.contains(g))
}

/// True iff `candidate` is disjoint from, contained in, or contains every
/// existing group.
pub fn validate_group<'a>(
    candidate: &[GpuId],
    existing: impl IntoIterator<Item = &'a [GpuId]>,
) -> bool {
    existing
        .into_iter()
        .all(|g| !overlaps(candidate, g) || subset(candidate, g) || subset(g, candidate))
}

/// Replicas whose groups intersect `target`; all of them must be invalidated
/// if `target` is turned into an instance.
pub fn choose_eviction_victims(target: &[GpuId], existing: &[ExistingReplica]) -> Vec<ReplicaId> {
    existing
        .iter()
        .filter(|r| overlaps(target, &r.group))
        .map(|r| r.id)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExistingReplica {
    pub id: ReplicaId,
    pub model_id: String,
    pub score: f64,
    pub group: Vec<GpuId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpuSnapshot {
    pub gpu: GpuId,
    pub server: usize,
    /// Idle, universal or grace workers may host new slots.
    pub eligible: bool,
    pub free_pages: u64,
    pub models: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Snapshot {
    pub gpus: Vec<GpuSnapshot>,
    pub existing: Vec<ExistingReplica>,
    /// GPU sets of grace instances; new groups must nest with them too.
    pub reserved_groups: Vec<Vec<GpuId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacementRequest {
    pub model_id: String,
    pub category: Category,
    pub rank: u32,
    pub score: f64,
    pub gpus: usize,
    pub pages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub request: PlacementRequest,
    pub group: Vec<GpuId>,
    /// Sum of scores of replicas already on the group.
    pub overlap_score: f64,
    /// Highest score among them.
    pub max_overlap_score: f64,
    pub preferred: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skip {
    pub request: PlacementRequest,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct PlacementPlan {
    pub assignments: Vec<Assignment>,
    pub skipped: Vec<Skip>,
}

/// Orders requests: Basic before Burst, then score descending.
pub fn sort_requests(reqs: &mut [PlacementRequest]) {
    reqs.sort_by(|a, b| {
        a.category
            .cmp(&b.category)
            .then(b.score.total_cmp(&a.score))
            .then(a.model_id.cmp(&b.model_id))
            .then(a.rank.cmp(&b.rank))
    });
}

/// All `k`-subsets of `items`, in lexicographic order.
pub fn combinations(items: &[GpuId], k: usize) -> Vec<Vec<GpuId>> {
    let mut out = Vec::new();
    if k == 0 || k > items.len() {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        let mut i = k;
        while i > 0 && idx[i - 1] == items.len() - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    r as usize
}

fn contiguous(items: &[GpuId], k: usize) -> Vec<Vec<GpuId>> {
    if k == 0 || k > items.len() {
        return Vec::new();
    }
    items
        .windows(k)
        .filter(|w| w[k - 1] - w[0] == k - 1)
        .map(|w| w.to_vec())
        .collect()
}

/// Candidate `k`-GPU groups drawn from `gpus` grouped by server, with the
/// validity predicate used to decide when contiguous-first falls back.
pub fn enumerate_groups(
    gpus_by_server: &[Vec<GpuId>],
    k: usize,
    params: &PlacementParams,
    valid: impl Fn(&[GpuId]) -> bool,
) -> Vec<Vec<GpuId>> {
    let mut out = Vec::new();
    for gpus in gpus_by_server {
        let all = binomial(gpus.len(), k) <= params.exhaustive_limit;
        match params.enumeration {
            Enumeration::Exhaustive if all => out.extend(combinations(gpus, k)),
            Enumeration::Exhaustive => out.extend(contiguous(gpus, k)),
            Enumeration::ContiguousFirst => out.extend(contiguous(gpus, k)),
        }
    }
    if params.enumeration == Enumeration::ContiguousFirst && !out.iter().any(|g| valid(g)) {
        out.clear();
        for gpus in gpus_by_server {
            if binomial(gpus.len(), k) <= params.exhaustive_limit {
                out.extend(combinations(gpus, k));
            }
        }
    }
    out.retain(|g| valid(g));
    out
}

/// Ordering for equally scored groups: fewer GPUs already hosting a
/// replica, then lowest GPU ids.
fn tie_break(a: &(f64, usize, &Vec<GpuId>), b: &(f64, usize, &Vec<GpuId>)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(b.2))
}

/// Greedy evict-aware placement. Requests are processed in the given order
/// (callers sort with [`sort_requests`]); each takes the cheapest valid group,
/// preferring groups whose existing replicas all score below it.
pub fn plan_placement(
    requests: &[PlacementRequest],
    snap: &Snapshot,
    params: &PlacementParams,
) -> PlacementPlan {
    let mut free: Vec<u64> = snap.gpus.iter().map(|g| g.free_pages).collect();
    let mut models: Vec<BTreeSet<String>> = snap.gpus.iter().map(|g| g.models.clone()).collect();
    let pos = |gpu: GpuId| snap.gpus.iter().position(|g| g.gpu == gpu);
    let mut groups: Vec<(f64, Vec<GpuId>)> = snap
        .existing
        .iter()
        .map(|r| (r.score, r.group.clone()))
        .collect();
    let mut plan = PlacementPlan::default();

    let mut servers: Vec<usize> = snap.gpus.iter().map(|g| g.server).collect();
    servers.sort_unstable();
    servers.dedup();

    for req in requests {
        let by_server: Vec<Vec<GpuId>> = servers
            .iter()
            .map(|&s| {
                snap.gpus
                    .iter()
                    .enumerate()
                    .filter(|(i, g)| {
                        g.server == s
                            && g.eligible
                            && free[*i] >= req.pages
                            && !models[*i].contains(&req.model_id)
                    })
                    .map(|(_, g)| g.gpu)
                    .collect()
            })
            .collect();
        let valid = |cand: &[GpuId]| {
            validate_group(cand, groups.iter().map(|(_, g)| g.as_slice()))
                && validate_group(cand, snap.reserved_groups.iter().map(|g| g.as_slice()))
        };
        let candidates = enumerate_groups(&by_server, req.gpus, params, valid);
        if candidates.is_empty() {
            let reason = if by_server.iter().all(|s| s.len() < req.gpus) {
                "insufficient memory or eligible GPUs"
            } else {
                "no group satisfies the nesting rule"
            };
            plan.skipped.push(Skip {
                request: req.clone(),
                reason: reason.into(),
            });
            continue;
        }
        let scored: Vec<(f64, f64, usize, &Vec<GpuId>)> = candidates
            .iter()
            .map(|c| {
                let over: Vec<&(f64, Vec<GpuId>)> =
                    groups.iter().filter(|(_, g)| overlaps(c, g)).collect();
                let s = over.iter().map(|(s, _)| *s).sum::<f64>();
                let h = over.iter().map(|(s, _)| *s).fold(0.0, f64::max);
                let touched = c
                    .iter()
                    .filter(|&&g| groups.iter().any(|(_, grp)| grp.contains(&g)))
                    .count();
                (s, h, touched, c)
            })
            .collect();
        let cmp = |a: &&(f64, f64, usize, &Vec<GpuId>), b: &&(f64, f64, usize, &Vec<GpuId>)| {
            tie_break(&(a.0, a.2, a.3), &(b.0, b.2, b.3))
        };
        let preferred = scored.iter().filter(|c| c.1 < req.score).min_by(cmp);
        let (chosen, is_pref) = match preferred {
            Some(c) => (*c, true),
            None => (
                *scored.iter().min_by(cmp).expect("candidates non-empty"),
                false,
            ),
        };
        let (s, h, _, group) = chosen;
        for &g in group.iter() {
            let i = pos(g).expect("group drawn from snapshot");
            free[i] -= req.pages;
            models[i].insert(req.model_id.clone());
        }
        groups.push((req.score, group.clone()));
        plan.assignments.push(Assignment {
            request: req.clone(),
            group: group.clone(),
            overlap_score: s,
            max_overlap_score: h,
            preferred: is_pref,
        });
    }
    plan
}

/// Among `candidates` (with an optional replica each would consume), picks
/// the group whose eviction victims have the smallest total score.
pub fn select_min_victim_group(
    candidates: &[(Vec<GpuId>, Option<ReplicaId>)],
    existing: &[ExistingReplica],
) -> Option<(usize, Vec<ReplicaId>, f64)> {
    let mut best: Option<(usize, Vec<ReplicaId>, f64, usize)> = None;
    for (i, (group, consumed)) in candidates.iter().enumerate() {
        let victims: Vec<ReplicaId> = choose_eviction_victims(group, existing)
            .into_iter()
            .filter(|v| Some(*v) != *consumed)
            .collect();
        let sum: f64 = existing
            .iter()
            .filter(|r| victims.contains(&r.id))
            .map(|r| r.score)
            .sum();
        let touched = group
            .iter()
            .filter(|&&g| existing.iter().any(|r| r.group.contains(&g)))
            .count();
        let better = match &best {
            None => true,
            Some((bi, _, bs, bt)) => {
                tie_break(&(sum, touched, group), &(*bs, *bt, &candidates[*bi].0)) == Ordering::Less
            }
        };
        if better {
            best = Some((i, victims, sum, touched));
        }
    }
    best.map(|(i, v, s, _)| (i, v, s))
}
