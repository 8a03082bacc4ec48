//! Mine scenario configuration: loading, validation, and the built-in
//! default and reduced scenarios.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A maintenance window scaling a load site's effective service rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbilityWindow {
    pub start_minute: f64,
    pub end_minute: f64,
    pub ratio: f64,
}

/// One truck of the heterogeneous fleet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruckSpec {
    pub capacity_tons: f64,
    pub speed_kmh: f64,
}

/// One shovel, bound to a load site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShovelSpec {
    pub load_site_index: usize,
    pub service_tons_per_minute: f64,
}

/// Full static description of a mine instance.
///
/// Distances are point-to-point kilometres; the road network is abstracted
/// away. Load-to-dump and dump-to-load legs are stored separately because
/// round trips are asymmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_load_sites: usize,
    pub num_dump_sites: usize,
    pub trucks: Vec<TruckSpec>,
    pub shovels: Vec<ShovelSpec>,
    pub dump_positions_per_site: usize,
    /// Charging site to each load site, length M.
    pub dist_charge_to_load: Vec<f64>,
    /// M x N, row = origin load site.
    pub dist_load_to_dump: Vec<Vec<f64>>,
    /// N x M, row = origin dump site.
    pub dist_dump_to_load: Vec<Vec<f64>>,
    pub speed_limit_kmh: f64,
    pub episode_minutes: f64,
    pub jam_probability_per_trip: f64,
    /// (min, max) minutes of extra delay when a trip hits a jam.
    pub jam_delay_minutes: (f64, f64),
    /// Per load site, maintenance windows scaling shovel service rates.
    pub ability_schedules: Vec<Vec<AbilityWindow>>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {field}: {reason}")]
    Validation { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field,
        reason: reason.into(),
    }
}

impl ScenarioConfig {
    pub fn num_trucks(&self) -> usize {
        self.trucks.len()
    }

    /// Width of the per-target feature blocks and of the action mask.
    pub fn action_width(&self) -> usize {
        self.num_load_sites.max(self.num_dump_sites)
    }

    pub fn shovels_at(&self, load_site: usize) -> impl Iterator<Item = (usize, &ShovelSpec)> {
        self.shovels
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.load_site_index == load_site)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let m = self.num_load_sites;
        let n = self.num_dump_sites;
        if m < 1 {
            return Err(invalid("num_load_sites", "must be >= 1"));
        }
        if n < 1 {
            return Err(invalid("num_dump_sites", "must be >= 1"));
        }
        if self.trucks.is_empty() {
            return Err(invalid("trucks", "fleet must have >= 1 truck"));
        }
        for (i, t) in self.trucks.iter().enumerate() {
            if !(t.capacity_tons > 0.0) {
                return Err(invalid("trucks", format!("truck {i}: capacity_tons must be > 0")));
            }
            if !(t.speed_kmh > 0.0) {
                return Err(invalid("trucks", format!("truck {i}: speed_kmh must be > 0")));
            }
        }
        if self.shovels.is_empty() {
            return Err(invalid("shovels", "must have >= 1 shovel"));
        }
        for (i, s) in self.shovels.iter().enumerate() {
            if s.load_site_index >= m {
                return Err(invalid(
                    "shovels",
                    format!("shovel {i}: load_site_index {} out of range 0..{m}", s.load_site_index),
                ));
            }
            if !(s.service_tons_per_minute > 0.0) {
                return Err(invalid(
                    "shovels",
                    format!("shovel {i}: service_tons_per_minute must be > 0"),
                ));
            }
        }
        for site in 0..m {
            if self.shovels_at(site).next().is_none() {
                return Err(invalid("shovels", format!("load site {site} has no shovel")));
            }
        }
        if self.dump_positions_per_site < 1 {
            return Err(invalid("dump_positions_per_site", "must be >= 1"));
        }
        if self.dist_charge_to_load.len() != m {
            return Err(invalid("dist_charge_to_load", format!("length must be {m}")));
        }
        if self.dist_charge_to_load.iter().any(|&d| !(d > 0.0)) {
            return Err(invalid("dist_charge_to_load", "all distances must be > 0"));
        }
        check_matrix("dist_load_to_dump", &self.dist_load_to_dump, m, n)?;
        check_matrix("dist_dump_to_load", &self.dist_dump_to_load, n, m)?;
        if !(self.speed_limit_kmh > 0.0) {
            return Err(invalid("speed_limit_kmh", "must be > 0"));
        }
        for (i, t) in self.trucks.iter().enumerate() {
            if t.speed_kmh > self.speed_limit_kmh {
                return Err(invalid(
                    "trucks",
                    format!("truck {i}: speed_kmh exceeds scenario speed limit"),
                ));
            }
        }
        if !(self.episode_minutes > 0.0) {
            return Err(invalid("episode_minutes", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.jam_probability_per_trip) {
            return Err(invalid("jam_probability_per_trip", "must be in [0, 1]"));
        }
        let (jmin, jmax) = self.jam_delay_minutes;
        if !(jmin >= 0.0 && jmin <= jmax) {
            return Err(invalid("jam_delay_minutes", "must satisfy 0 <= min <= max"));
        }
        if self.ability_schedules.len() != m {
            return Err(invalid("ability_schedules", format!("length must be {m}")));
        }
        for (site, windows) in self.ability_schedules.iter().enumerate() {
            for w in windows {
                if !(w.start_minute >= 0.0 && w.start_minute <= w.end_minute) {
                    return Err(invalid(
                        "ability_schedules",
                        format!("site {site}: window must satisfy 0 <= start <= end"),
                    ));
                }
                if !(0.0..=1.0).contains(&w.ratio) {
                    return Err(invalid(
                        "ability_schedules",
                        format!("site {site}: ratio must be in [0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| ScenarioError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }
}

fn check_matrix(
    field: &'static str,
    mat: &[Vec<f64>],
    rows: usize,
    cols: usize,
) -> Result<(), ScenarioError> {
    if mat.len() != rows {
        return Err(invalid(field, format!("must have {rows} rows")));
    }
    for (r, row) in mat.iter().enumerate() {
        if row.len() != cols {
            return Err(invalid(field, format!("row {r} must have {cols} columns")));
        }
        if row.iter().any(|&d| !(d > 0.0)) {
            return Err(invalid(field, format!("row {r}: all distances must be > 0")));
        }
    }
    Ok(())
}

/// Loads and validates a scenario from a JSON document. Unknown keys are
/// rejected.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let config: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

// Deterministic pseudo-distance in [2, 8) km from integer coordinates.
// Plain integer hashing so scenario construction never touches an RNG.
fn synth_km(a: usize, b: usize, salt: usize) -> f64 {
    let h = a.wrapping_mul(31).wrapping_add(b.wrapping_mul(17)).wrapping_add(salt.wrapping_mul(7)) % 23;
    2.0 + 6.0 * (h as f64) / 23.0
}

/// The built-in paper-scale scenario: 5 load sites, 5 dump sites, 71 trucks
/// in three capacity classes, 21 heterogeneous shovels, 240-minute shift.
/// Return legs carry a deterministic +10% skew so round trips are asymmetric.
pub fn default_scenario() -> ScenarioConfig {
    let m = 5;
    let n = 5;
    let k = 71;

    // Three fleet classes in roughly equal shares: 24 + 24 + 23.
    let classes = [(25.0, 22.0), (40.0, 20.0), (55.0, 18.0)];
    let trucks: Vec<TruckSpec> = (0..k)
        .map(|i| {
            let (capacity_tons, speed_kmh) = classes[i % 3];
            TruckSpec { capacity_tons, speed_kmh }
        })
        .collect();

    // 21 shovels over 5 sites: 5 at site 0, 4 elsewhere; rates spread over [1, 3].
    let per_site = [5usize, 4, 4, 4, 4];
    let mut shovels = Vec::new();
    let mut idx = 0usize;
    for (site, &count) in per_site.iter().enumerate() {
        for _ in 0..count {
            let rate = 1.0 + 2.0 * (idx as f64) / 20.0;
            shovels.push(ShovelSpec {
                load_site_index: site,
                service_tons_per_minute: rate,
            });
            idx += 1;
        }
    }

    let dist_load_to_dump: Vec<Vec<f64>> =
        (0..m).map(|i| (0..n).map(|j| synth_km(i, j, 1)).collect()).collect();
    let dist_dump_to_load: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| dist_load_to_dump[i][j] * 1.10).collect())
        .collect();

    let config = ScenarioConfig {
        num_load_sites: m,
        num_dump_sites: n,
        trucks,
        shovels,
        dump_positions_per_site: 4,
        dist_charge_to_load: (0..m).map(|i| synth_km(i, 11, 2)).collect(),
        dist_load_to_dump,
        dist_dump_to_load,
        speed_limit_kmh: 25.0,
        episode_minutes: 240.0,
        jam_probability_per_trip: 0.05,
        jam_delay_minutes: (5.0, 15.0),
        // One maintenance window per site, staggered through the shift.
        ability_schedules: (0..m)
            .map(|site| {
                vec![AbilityWindow {
                    start_minute: 60.0 + 20.0 * site as f64,
                    end_minute: 80.0 + 20.0 * site as f64,
                    ratio: 0.6,
                }]
            })
            .collect(),
        seed: 42,
    };
    debug_assert!(config.validate().is_ok());
    config
}

/// A deterministic small scenario for tests and smoke training.
pub fn reduced_scenario(
    m: usize,
    n: usize,
    k: usize,
    minutes: f64,
) -> Result<ScenarioConfig, ScenarioError> {
    if m < 1 {
        return Err(invalid("num_load_sites", "must be >= 1"));
    }
    if n < 1 {
        return Err(invalid("num_dump_sites", "must be >= 1"));
    }
    if k < 1 {
        return Err(invalid("trucks", "must be >= 1"));
    }
    if !(minutes > 0.0) {
        return Err(invalid("episode_minutes", "must be > 0"));
    }

    let classes = [(30.0, 22.0), (45.0, 20.0)];
    let trucks: Vec<TruckSpec> = (0..k)
        .map(|i| {
            let (capacity_tons, speed_kmh) = classes[i % 2];
            TruckSpec { capacity_tons, speed_kmh }
        })
        .collect();

    let shovels: Vec<ShovelSpec> = (0..m)
        .map(|site| ShovelSpec {
            load_site_index: site,
            service_tons_per_minute: 2.0 + 0.5 * (site as f64),
        })
        .collect();

    let dist_load_to_dump: Vec<Vec<f64>> =
        (0..m).map(|i| (0..n).map(|j| synth_km(i, j, 3)).collect()).collect();
    let dist_dump_to_load: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| dist_load_to_dump[i][j] * 1.10).collect())
        .collect();

    let config = ScenarioConfig {
        num_load_sites: m,
        num_dump_sites: n,
        trucks,
        shovels,
        dump_positions_per_site: 2,
        dist_charge_to_load: (0..m).map(|i| synth_km(i, 5, 4)).collect(),
        dist_load_to_dump,
        dist_dump_to_load,
        speed_limit_kmh: 25.0,
        episode_minutes: minutes,
        jam_probability_per_trip: 0.05,
        jam_delay_minutes: (2.0, 6.0),
        ability_schedules: vec![Vec::new(); m],
        seed: 42,
    };
    config.validate()?;
    Ok(config)
}
