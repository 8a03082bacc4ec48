//! Observation vector and legal-action mask for dispatch requests.
//!
//! Layout, in order: event one-hot (3); time_delta (1); time_now (1);
//! time_left (1); truck location one-hot (M+N+1, load sites then dump
//! sites then charging); truck features (2: log(load+1),
//! log(cycle_time+1)); then ten per-target blocks of width max(M,N):
//! travel_time, truck_counts, road_dist, road_jam, est_wait,
//! tar_wait_time, queue_lens, tar_capa, ability_ratio, produced_tons.
//! Per-target slots beyond the number of valid targets are zero padding.

use crate::sim::{DispatchRequest, EventType, SimState, SiteId};

pub type Observation = Vec<f64>;
pub type ActionMask = Vec<bool>;

/// Observation length for an M x N mine.
pub fn obs_dim(m: usize, n: usize) -> usize {
    8 + (m + n + 1) + 10 * m.max(n)
}

fn log1p(x: f64) -> f64 {
    (x + 1.0).ln()
}

/// Targets reachable from the request's location, in mask order.
fn targets(state: &SimState, request: &DispatchRequest) -> Vec<SiteId> {
    match request.event_type {
        EventType::Init | EventType::Load => {
            (0..state.config().num_load_sites).map(SiteId::Load).collect()
        }
        EventType::Haul => (0..state.config().num_dump_sites).map(SiteId::Dump).collect(),
    }
}

/// Legal-action mask: load sites for init/load orders, dump sites for
/// haul orders, padded to width max(M,N).
pub fn mask(state: &SimState, request: &DispatchRequest) -> ActionMask {
    let width = state.config().action_width();
    let valid = match request.event_type {
        EventType::Init | EventType::Load => state.config().num_load_sites,
        EventType::Haul => state.config().num_dump_sites,
    };
    (0..width).map(|i| i < valid).collect()
}

/// Encodes the Table-style feature vector for a pending request.
pub fn encode(state: &SimState, request: &DispatchRequest) -> Observation {
    let config = state.config();
    let m = config.num_load_sites;
    let n = config.num_dump_sites;
    let width = config.action_width();
    let k = config.num_trucks() as f64;
    let truck = request.truck_index;

    let mut v = Vec::with_capacity(obs_dim(m, n));

    // Order state.
    let event_onehot = match request.event_type {
        EventType::Init => [1.0, 0.0, 0.0],
        EventType::Haul => [0.0, 1.0, 0.0],
        EventType::Load => [0.0, 0.0, 1.0],
    };
    v.extend_from_slice(&event_onehot);
    v.push(request.time_delta / 60.0);
    let time_now = request.clock / config.episode_minutes;
    v.push(time_now);
    v.push(1.0 - time_now);

    // Truck location one-hot: [load 0..M, dump 0..N, charging].
    let location = state.truck_location(truck);
    for i in 0..m {
        v.push(if location == SiteId::Load(i) { 1.0 } else { 0.0 });
    }
    for j in 0..n {
        v.push(if location == SiteId::Dump(j) { 1.0 } else { 0.0 });
    }
    v.push(if location == SiteId::Charging { 1.0 } else { 0.0 });

    // Truck self state.
    v.push(log1p(state.truck_loaded_tons(truck)));
    v.push(log1p(state.last_cycle_minutes(truck)));

    // Per-target blocks, padded to `width`.
    let tgts = targets(state, request);
    let block = |f: &mut dyn FnMut(SiteId) -> f64, v: &mut Vec<f64>| {
        for &t in &tgts {
            v.push(f(t));
        }
        for _ in tgts.len()..width {
            v.push(0.0);
        }
    };

    block(
        &mut |t| log1p(state.travel_minutes(truck, location, t)),
        &mut v,
    );
    block(&mut |t| state.trucks_en_route_to(t) as f64 / k, &mut v);
    block(&mut |t| log1p(state.distance_km(location, t)), &mut v);
    block(&mut |t| state.jams_active_to(t) as f64, &mut v);
    block(
        &mut |t| {
            let arrival = request.clock + state.travel_minutes(truck, location, t);
            log1p(state.estimate_wait_minutes(t, arrival, true))
        },
        &mut v,
    );
    block(
        &mut |t| log1p(state.estimate_wait_minutes(t, request.clock, false)),
        &mut v,
    );
    block(&mut |t| state.queue_len(t) as f64 / k, &mut v);
    block(
        &mut |t| match t {
            SiteId::Load(i) => log1p(config.shovels_at(i).count() as f64),
            SiteId::Dump(_) => log1p(config.dump_positions_per_site as f64),
            SiteId::Charging => 0.0,
        },
        &mut v,
    );
    block(
        &mut |t| match t {
            SiteId::Load(i) => state.ability_ratio_now(i),
            _ => 1.0,
        },
        &mut v,
    );
    block(&mut |t| log1p(state.produced_at_target(t)), &mut v);

    debug_assert_eq!(v.len(), obs_dim(m, n));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{default_scenario, reduced_scenario};
    use crate::sim::{reset, StepOutcome};

    #[test]
    fn obs_dim_examples() {
        assert_eq!(obs_dim(5, 5), 69);
        assert_eq!(obs_dim(1, 1), 21);
        assert_eq!(obs_dim(2, 5), 66);
    }

    #[test]
    fn init_request_encoding_at_clock_zero() {
        let config = default_scenario();
        let (state, req) = reset(&config, 42);
        let v = encode(&state, &req);
        assert_eq!(v.len(), 69);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]); // init one-hot
        assert_eq!(v[3], 0.0); // time_delta
        assert_eq!(v[4], 0.0); // time_now
        assert_eq!(v[5], 1.0); // time_left
        // Location one-hot: charging slot is the last of the M+N+1 block.
        let loc = &v[6..6 + 11];
        assert_eq!(loc.iter().sum::<f64>(), 1.0);
        assert_eq!(loc[10], 1.0);
        // Zero production at every target -> log(1) = 0.
        let produced = &v[v.len() - 5..];
        assert!(produced.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_by_event_type() {
        let config = default_scenario();
        let (state, req) = reset(&config, 42);
        assert_eq!(mask(&state, &req), vec![true; 5]);

        let mut narrow = reduced_scenario(5, 3, 2, 120.0).unwrap();
        narrow.jam_probability_per_trip = 0.0;
        let (mut state, _) = reset(&narrow, 0);
        loop {
            let (outcome, _) = state.step(0).unwrap();
            match outcome {
                StepOutcome::Request(r) => {
                    if r.event_type == crate::sim::EventType::Haul {
                        assert_eq!(
                            mask(&state, &r),
                            vec![true, true, true, false, false]
                        );
                        break;
                    }
                }
                StepOutcome::EpisodeEnd => panic!("no haul request seen"),
            }
        }

        let wide = reduced_scenario(2, 5, 1, 10.0).unwrap();
        let (state, req) = reset(&wide, 0);
        // Init targets the 2 load sites, padded to width 5.
        assert_eq!(mask(&state, &req), vec![true, true, false, false, false]);
    }

    #[test]
    fn encode_is_pure_and_finite_over_a_rollout() {
        let config = reduced_scenario(2, 3, 6, 240.0).unwrap();
        let (mut state, first) = reset(&config, 3);
        let mut pending = Some(first);
        let mut decisions = 0usize;
        while let Some(req) = pending {
            let a = encode(&state, &req);
            let b = encode(&state, &req);
            assert_eq!(a, b);
            assert!(a.iter().all(|x| x.is_finite()));
            // One-hot blocks sum to 1.
            assert_eq!(a[0..3].iter().sum::<f64>(), 1.0);
            assert_eq!(a[6..6 + 6].iter().sum::<f64>(), 1.0);
            // Padding beyond the valid targets is zero in every block.
            let valid = mask(&state, &req).iter().filter(|&&b| b).count();
            let width = config.action_width();
            let base = 8 + 6;
            for blk in 0..10 {
                for slot in valid..width {
                    assert_eq!(a[base + blk * width + slot], 0.0);
                }
            }
            decisions += 1;
            pending = match state.step(0).unwrap().0 {
                StepOutcome::Request(r) => Some(r),
                StepOutcome::EpisodeEnd => None,
            };
        }
        assert!(decisions > 10);
    }
}
