//! Closed-form examples and brute-force oracles for the control-plane formulas.

mod common;

use common::{link, model, GIB, MIB};
use prewarm_sim::cluster::{
    reclaimable_bytes, required_layers, reservation_target, Cluster, StartupCosts, Topology,
};
use prewarm_sim::memswitch::{background_kv_mapping, pipelined_load, LinkParams};
use prewarm_sim::placement::{prewarm_score, replica_counts, Category};
use prewarm_sim::predictor::{
    weighted_error, PredictorParams, PredictorState, Target, WeightOrientation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GB: f64 = 1e9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn reservation_target_examples() {
    assert!(close(
        reservation_target(100.0 * GB, 32, 8, 20.0 * GB),
        25.0 * GB
    ));
    assert!(close(
        reservation_target(100.0 * GB, 32, 0, 0.0),
        100.0 * GB / 32.0
    ));
    assert!(close(
        reservation_target(100.0 * GB, 32, 32, 50.0 * GB),
        100.0 * GB
    ));
    assert!(close(reclaimable_bytes(50.0 * GB, 25.0 * GB), 25.0 * GB));
    assert_eq!(reclaimable_bytes(10.0, 25.0), 0.0);
}

/// Counts by incrementing instances until each load level is covered.
fn replica_counts_oracle(k: u32, b: u32, avg: f64, peak: f64) -> (u32, u32) {
    let covered = |n: u32, load: f64| (n * b) as f64 >= load;
    let mut basic = 0;
    while !covered(k + basic, avg) {
        basic += 1;
    }
    let mut burst = 0;
    while !covered(k + basic + burst, peak) {
        burst += 1;
    }
    (basic, burst)
}

#[test]
fn replica_counts_match_oracle() {
    assert_eq!(replica_counts(1, 32, 40.0, 100.0), (1, 2));
    assert_eq!(replica_counts(0, 32, 0.0, 0.0), (0, 0));
    assert_eq!(replica_counts(4, 32, 50.0, 100.0), (0, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let k = rng.random_range(0..6);
        let b = rng.random_range(1..64);
        let avg = rng.random_range(0.0..400.0);
        let peak = avg + rng.random_range(0.0..400.0);
        assert_eq!(
            replica_counts(k, b, avg, peak),
            replica_counts_oracle(k, b, avg, peak)
        );
    }
}

#[test]
fn prewarm_score_examples() {
    assert_eq!(
        prewarm_score(Category::Basic, 0, 1, 2, 10_000.0, 40.0, 100.0, 10.0),
        10_000.0
    );
    let burst = prewarm_score(Category::Burst, 0, 1, 2, 10_000.0, 40.0, 100.0, 10.0);
    assert!(close(burst, (-1.0f64 / 3.0).exp() * 10_000.0 * 1.5));
    assert!((burst - 10_748.0).abs() < 1.0);
    assert_eq!(
        prewarm_score(Category::Burst, 0, 1, 1, 10_000.0, 40.0, 40.0, 10.0),
        0.0
    );
    // Rank decay inside a category and the burst offset by N_basic.
    let b1 = prewarm_score(Category::Basic, 1, 2, 2, 8_000.0, 10.0, 30.0, 10.0);
    assert!(close(b1, (-0.25f64).exp() * 8_000.0));
    let u1 = prewarm_score(Category::Burst, 1, 2, 2, 8_000.0, 10.0, 30.0, 10.0);
    assert!(close(u1, (-0.75f64).exp() * 8_000.0 * 2.0));
}

#[test]
fn corrective_delta_example() {
    assert!(close(
        weighted_error(&[1.0, -1.0], WeightOrientation::RecentHeaviest),
        1.0 / 3.0
    ));
    assert!(close(
        weighted_error(&[1.0, -1.0], WeightOrientation::OldestHeaviest),
        -1.0 / 3.0
    ));
    assert!(close(
        weighted_error(&[2.5], WeightOrientation::RecentHeaviest),
        2.5
    ));
    assert_eq!(
        weighted_error(&[0.0, 0.0, 0.0], WeightOrientation::RecentHeaviest),
        0.0
    );
}

fn params(d: u32, n: u32, wpd: u32) -> PredictorParams {
    PredictorParams {
        seasonal_days: d,
        lookback: n,
        orientation: WeightOrientation::RecentHeaviest,
        windows_per_day: wpd,
    }
}

#[test]
fn seasonal_delta_predict_compose() {
    // Window 2 of day 2: seasonal (14 + 10) / 2 = 12; lag 1 error 6 - 5 = +1,
    // lag 2 error 7 - 8 = -1, so the prediction is 12 + 1/3.
    let mut p = PredictorState::new("m", Target::Average, params(2, 2, 4)).unwrap();
    for (d, w, v) in [
        (0, 0, 8.0),
        (1, 0, 8.0),
        (2, 0, 7.0),
        (0, 1, 5.0),
        (1, 1, 5.0),
        (2, 1, 6.0),
        (0, 2, 10.0),
        (1, 2, 14.0),
    ] {
        p.observe_value(d, w, v).unwrap();
    }
    assert!(close(p.seasonal_component(2, 2).unwrap(), 12.0));
    let e = p.lagged_errors(2, 2);
    assert_eq!(e.len(), 2);
    assert!(close(e[0], 1.0) && close(e[1], -1.0));
    let pred = p.predict(2, 2).unwrap();
    assert!(close(pred.delta, 1.0 / 3.0));
    assert!(close(pred.predicted, 12.0 + 1.0 / 3.0));
}

#[test]
fn prediction_clamps_at_zero() {
    // Seasonal 1 with a single lag error of -3.
    let mut p = PredictorState::new("m", Target::Peak, params(1, 1, 2)).unwrap();
    p.observe_value(0, 0, 4.0).unwrap();
    p.observe_value(0, 1, 1.0).unwrap();
    p.observe_value(1, 0, 1.0).unwrap();
    let pred = p.predict(1, 1).unwrap();
    assert!(close(pred.seasonal, 1.0) && close(pred.delta, -3.0));
    assert_eq!(pred.predicted, 0.0);
}

#[test]
fn seasonal_uses_available_days_only() {
    let mut p = PredictorState::new("m", Target::Average, params(3, 1, 1)).unwrap();
    p.observe_value(0, 0, 9.0).unwrap();
    assert!(close(p.seasonal_component(1, 0).unwrap(), 9.0));
    assert!(p.seasonal_component(0, 0).is_err());
    assert!(p.observe_value(0, 0, 1.0).is_err());
}

/// Runs the layer pipeline step by step: the first `k` layers are resident,
/// the rest arrive one `load` apart, and each layer computes for `compute`
/// once it has arrived and its predecessor finished.
fn pipeline_stalls(layers: u32, k: u32, load: f64, compute: f64) -> bool {
    let mut finish = 0.0f64;
    for l in 1..=layers {
        let arrive = if l <= k { 0.0 } else { (l - k) as f64 * load };
        let ideal = (l - 1) as f64 * compute;
        let start = finish.max(arrive);
        if start > ideal + 1e-9 {
            return true;
        }
        finish = start + compute;
    }
    false
}

fn required_layers_oracle(layers: u32, load: f64, compute: f64) -> u32 {
    (1..layers)
        .find(|&k| !pipeline_stalls(layers, k, load, compute))
        .unwrap_or(layers)
}

#[test]
fn required_layers_match_pipeline_simulation() {
    assert_eq!(required_layers(8, 1.0, 1.0), 1);
    assert_eq!(required_layers(8, 0.1, 1.0), 1);
    assert_eq!(
        required_layers(8, 2.0, 1.0),
        required_layers_oracle(8, 2.0, 1.0)
    );
    // l = 8 needs (8 - k) * 2 <= 7, so k = 5.
    assert_eq!(required_layers(8, 2.0, 1.0), 5);
    assert_eq!(required_layers(8, 1e-12, 1.0), 1);
    assert_eq!(required_layers(1, 5.0, 1.0), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5_000 {
        let layers = rng.random_range(1..100);
        let compute = rng.random_range(0.1..5.0);
        let load = compute * rng.random_range(0.0..6.0);
        assert_eq!(
            required_layers(layers, load, compute),
            required_layers_oracle(layers, load, compute),
            "layers={layers} load={load} compute={compute}"
        );
    }
}

/// Mapper and copier as two sequential servers over page-granular chunks.
fn pipeline_finish_oracle(bytes: u64, l: &LinkParams) -> f64 {
    let chunk = l.chunk_pages * l.page_size;
    let n = bytes.div_ceil(chunk);
    let mut mapper = 0.0f64;
    let mut copier = 0.0f64;
    for i in 0..n {
        let b = (bytes - i * chunk).min(chunk);
        mapper += b.div_ceil(l.page_size) as f64 * l.map_ms_per_page;
        copier = copier.max(mapper) + b as f64 / l.bandwidth_bytes_per_ms;
    }
    copier
}

#[test]
fn pipelined_load_matches_two_server_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2_000 {
        let l = LinkParams {
            bandwidth_bytes_per_ms: rng.random_range(1e6..1e8),
            map_ms_per_page: rng.random_range(0.0..0.2),
            page_size: [4096, 64 * 1024, 2 * MIB][rng.random_range(0..3)],
            chunk_pages: rng.random_range(1..256),
        };
        let bytes = rng.random_range(0..4 * GIB);
        let plan = pipelined_load(bytes, &l);
        let oracle = pipeline_finish_oracle(bytes, &l);
        assert!(
            (plan.finish_time - oracle).abs() <= 1e-6 * oracle.max(1.0),
            "{l:?} {bytes}"
        );
        assert!(plan.finish_time + 1e-9 >= plan.transfer_lower_bound());
    }
}

#[test]
fn mapping_hidden_costs_one_chunk_map() {
    // 2^25 B/ms: a 64-page chunk of 2 MiB pages copies in 4 ms, maps in 2.5 ms.
    let l = LinkParams {
        map_ms_per_page: 2.5 / 64.0,
        ..link(0.0)
    };
    assert!(l.mapping_hidden());
    let plan = pipelined_load(GIB, &l);
    assert_eq!(
        plan.finish_time,
        2.5 + GIB as f64 / l.bandwidth_bytes_per_ms
    );
    assert_eq!(plan.critical_path_stall, 0.0);
    let single = pipelined_load(MIB, &l);
    assert!(close(
        single.finish_time,
        1.0 / 64.0 * 2.5 + MIB as f64 / l.bandwidth_bytes_per_ms
    ));
}

#[test]
fn calibration_point_mapping_dominates() {
    // 10 GiB of 2 MiB pages mapped in 200 ms; 10 GB over 128 GB/s takes 78.125 ms.
    let mu = 0.0390625;
    assert!(close((10 * GIB / (2 * MIB)) as f64 * mu, 200.0));
    let l = LinkParams {
        bandwidth_bytes_per_ms: 128e6,
        map_ms_per_page: mu,
        page_size: 2 * MIB,
        chunk_pages: 64,
    };
    assert!(close(10e9 / l.bandwidth_bytes_per_ms, 78.125));
    assert!(!l.mapping_hidden());
    let plan = pipelined_load(10_000_000_000, &l);
    assert!(close(
        plan.finish_time,
        pipeline_finish_oracle(10_000_000_000, &l)
    ));
    // 4769 pages map in ~186 ms; only the last chunk's copy trails the mapper.
    let map_all = 10_000_000_000u64.div_ceil(2 * MIB) as f64 * mu;
    let last_copy = plan.chunks.last().unwrap().bytes as f64 / l.bandwidth_bytes_per_ms;
    assert!(close(plan.finish_time, map_all + last_copy));
}

/// Consumer needs page `i` at `i / rate`; page `i` is mapped at `i * mu`.
fn kv_race_oracle(pages: u64, mu: f64, rate: f64) -> f64 {
    let mut t = 0.0f64;
    for i in 1..=pages {
        t = (t + 1.0 / rate).max(i as f64 * mu);
    }
    t - pages as f64 / rate
}

#[test]
fn kv_mapping_stall_matches_race() {
    assert_eq!(background_kv_mapping(1000, 0.125, 4.0), 0.0);
    assert_eq!(background_kv_mapping(1000, 0.25, 4.0), 0.0);
    // Mapping at half the consumption rate.
    let s = background_kv_mapping(1000, 2.0, 1.0);
    assert!(close(s, 1000.0 * (2.0 - 1.0)));
    let s = background_kv_mapping(1000, 1.0, 2.0);
    assert!(close(s, 500.0));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..500 {
        let pages = rng.random_range(1..5_000);
        let mu = rng.random_range(0.001..1.0);
        let rate = rng.random_range(0.5..50.0);
        let got = background_kv_mapping(pages, mu, rate);
        let want = kv_race_oracle(pages, mu, rate);
        assert!(
            (got - want).abs() <= 1e-6 * want.max(1.0),
            "{pages} {mu} {rate}: {got} vs {want}"
        );
    }
}

#[test]
fn reclaim_telescopes_against_ledger() {
    let mut c = Cluster::new(
        Topology {
            servers: 1,
            gpus_per_server: 2,
            pages_per_gpu: 10_000,
        },
        link(0.0),
        StartupCosts {
            warm_start_ms: 500.0,
            cold_extra_ms: 5_000.0,
        },
        vec![prewarm_sim::cluster::ModelSpec {
            max_batch: 16,
            ..model("m", 1, 4)
        }],
    );
    let p = c.promote_to_dedicated(&[0], "m", 0).unwrap();
    let id = p.instance;
    c.mark_active(id, 10).unwrap();
    let page = c.page_size();
    let cap = c.instances[&id].kv_capacity_bytes as f64;
    let batch = c.instances[&id].batch;
    for r in 0..12u64 {
        c.instances.get_mut(&id).unwrap().inflight.insert(r);
    }
    c.enter_grace(id, 20).unwrap();
    let initial = c.workers[0].kv_pages_mapped * page;

    let mut ledger = initial;
    let mut total = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut used = cap * 0.3;
    for r in 0..12u64 {
        c.instances.get_mut(&id).unwrap().inflight.remove(&r);
        used *= rng.random_range(0.5..1.0);
        let inflight = c.instances[&id].inflight.len() as f64;
        let target = (cap * inflight / batch as f64).max(used + cap / batch as f64);
        let want = ((ledger as f64 - target).max(0.0) as u64 / page) * page;
        let freed = c.reclaim_on_completion(id, 0, used, 30 + r).unwrap();
        assert_eq!(freed, want);
        ledger -= want;
        total += freed;
        assert_eq!(c.workers[0].kv_pages_mapped * page, ledger);
    }
    assert_eq!(total, initial - c.workers[0].kv_pages_mapped * page);
    assert!(c.check_invariants().is_empty());
}
