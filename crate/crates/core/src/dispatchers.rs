//! Rule-based dispatch policies. SPTF doubles as the teacher policy for
//! guided training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::ScenarioConfig;
use crate::sim::{DispatchRequest, EventType, SimState, SiteId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispatcherKind {
    Naive,
    Random,
    Nearest,
    ShortestTrip,
    ShortestQueue,
    Sptf,
    FixedGroup,
}

impl DispatcherKind {
    pub const ALL: [DispatcherKind; 7] = [
        DispatcherKind::Naive,
        DispatcherKind::Random,
        DispatcherKind::Nearest,
        DispatcherKind::ShortestTrip,
        DispatcherKind::ShortestQueue,
        DispatcherKind::Sptf,
        DispatcherKind::FixedGroup,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DispatcherKind::Naive => "naive",
            DispatcherKind::Random => "random",
            DispatcherKind::Nearest => "nearest",
            DispatcherKind::ShortestTrip => "shortest_trip",
            DispatcherKind::ShortestQueue => "shortest_queue",
            DispatcherKind::Sptf => "sptf",
            DispatcherKind::FixedGroup => "fixed_group",
        }
    }
}

impl fmt::Display for DispatcherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DispatcherKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DispatcherKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = DispatcherKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown dispatcher '{s}', expected one of: {}", names.join(", "))
            })
    }
}

/// Valid target sites for a request, in action-index order.
fn targets(state: &SimState, request: &DispatchRequest) -> Vec<SiteId> {
    match request.event_type {
        EventType::Init | EventType::Load => {
            (0..state.config().num_load_sites).map(SiteId::Load).collect()
        }
        EventType::Haul => (0..state.config().num_dump_sites).map(SiteId::Dump).collect(),
    }
}

// Strict-less argmin keeps the lowest index on ties.
fn argmin_by_key(count: usize, mut key: impl FnMut(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_key = key(0);
    for i in 1..count {
        let k = key(i);
        if k < best_key {
            best = i;
            best_key = k;
        }
    }
    best
}

/// Estimated completion time for sending `truck` to `target`: travel,
/// predicted queue wait at arrival (counting en-route trucks), own service.
pub fn estimated_completion_minutes(
    state: &SimState,
    request: &DispatchRequest,
    target: SiteId,
) -> f64 {
    let truck = request.truck_index;
    let from = state.truck_location(truck);
    let travel = state.travel_minutes(truck, from, target);
    let wait = state.estimate_wait_minutes(target, request.clock + travel, true);
    travel + wait + state.service_minutes_at(truck, target)
}

/// The SPTF rule: minimize estimated completion time, ties to the lower
/// site index. Used both as a baseline dispatcher and as the teacher.
pub fn teacher_action(state: &SimState, request: &DispatchRequest) -> usize {
    let tgts = targets(state, request);
    argmin_by_key(tgts.len(), |i| {
        estimated_completion_minutes(state, request, tgts[i])
    })
}

fn nearest_dump(state: &SimState, truck: usize, from: SiteId) -> usize {
    let n = state.config().num_dump_sites;
    argmin_by_key(n, |j| state.travel_minutes(truck, from, SiteId::Dump(j)))
}

/// Largest-remainder apportionment of K trucks over load sites,
/// proportional to each site's total shovel rate.
pub fn fixed_group_assignment(config: &ScenarioConfig) -> Vec<usize> {
    let m = config.num_load_sites;
    let k = config.num_trucks();
    let weights: Vec<f64> = (0..m)
        .map(|site| {
            config
                .shovels_at(site)
                .map(|(_, s)| s.service_tons_per_minute)
                .sum()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| k as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Hand out the remaining trucks by largest fractional remainder.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(k - assigned) {
        counts[order[i % m]] += 1;
    }
    let mut assignment = Vec::with_capacity(k);
    for (site, &count) in counts.iter().enumerate() {
        assignment.extend(std::iter::repeat(site).take(count));
    }
    assignment
}

/// A rule-based dispatcher instance. Stateless apart from the seeded
/// stream of the random rule and the fixed-group assignment table.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    kind: DispatcherKind,
    rng: ChaCha8Rng,
    fixed_assignment: Vec<usize>,
}

impl Dispatcher {
    pub fn new(kind: DispatcherKind, config: &ScenarioConfig, seed: u64) -> Self {
        Dispatcher {
            kind,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fixed_assignment: fixed_group_assignment(config),
        }
    }

    pub fn kind(&self) -> DispatcherKind {
        self.kind
    }

    /// Chooses a target-site index; always legal for the request's mask.
    pub fn decide(&mut self, state: &SimState, request: &DispatchRequest) -> usize {
        let tgts = targets(state, request);
        let truck = request.truck_index;
        let from = state.truck_location(truck);
        match self.kind {
            DispatcherKind::Naive => 0,
            DispatcherKind::Random => self.rng.gen_range(0..tgts.len()),
            DispatcherKind::Nearest => argmin_by_key(tgts.len(), |i| {
                state.travel_minutes(truck, from, tgts[i])
            }),
            DispatcherKind::ShortestTrip => argmin_by_key(tgts.len(), |i| {
                let out = state.travel_minutes(truck, from, tgts[i]);
                // Cheapest return leg from the candidate target.
                let back = match tgts[i] {
                    SiteId::Load(site) => (0..state.config().num_dump_sites)
                        .map(|j| state.travel_minutes(truck, SiteId::Load(site), SiteId::Dump(j)))
                        .fold(f64::INFINITY, f64::min),
                    SiteId::Dump(site) => (0..state.config().num_load_sites)
                        .map(|l| state.travel_minutes(truck, SiteId::Dump(site), SiteId::Load(l)))
                        .fold(f64::INFINITY, f64::min),
                    SiteId::Charging => 0.0,
                };
                out + back
            }),
            DispatcherKind::ShortestQueue => {
                argmin_by_key(tgts.len(), |i| state.queue_len(tgts[i]) as f64)
            }
            DispatcherKind::Sptf => teacher_action(state, request),
            DispatcherKind::FixedGroup => match request.event_type {
                EventType::Init | EventType::Load => self.fixed_assignment[truck],
                EventType::Haul => nearest_dump(state, truck, from),
            },
        }
    }
}
