//! Per-decision reward computation in sparse or dense mode.

use serde::{Deserialize, Serialize};

use crate::sim::StepInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Sparse,
    Dense,
}

impl std::str::FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sparse" => Ok(RewardMode::Sparse),
            "dense" => Ok(RewardMode::Dense),
            other => Err(format!("unknown reward mode \"{other}\" (sparse, dense)")),
        }
    }
}

/// Reward coefficients. The dense defaults weight incremental production
/// against wait/service/jam/move penalties; sparse mode keeps only the
/// terminal production bonus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mode: RewardMode,
    pub final_tons_coef: f64,
    pub delta_tons_coef: f64,
    pub wait_coef: f64,
    pub service_coef: f64,
    pub jam_coef: f64,
    pub move_coef: f64,
}

impl RewardConfig {
    pub fn dense() -> Self {
        RewardConfig {
            mode: RewardMode::Dense,
            final_tons_coef: 0.1,
            delta_tons_coef: 2.0,
            wait_coef: -0.5,
            service_coef: -0.1,
            jam_coef: -0.1,
            move_coef: -0.01,
        }
    }

    pub fn sparse() -> Self {
        RewardConfig {
            mode: RewardMode::Sparse,
            final_tons_coef: 0.1,
            delta_tons_coef: 0.0,
            wait_coef: 0.0,
            service_coef: 0.0,
            jam_coef: 0.0,
            move_coef: 0.0,
        }
    }

    pub fn for_mode(mode: RewardMode) -> Self {
        match mode {
            RewardMode::Sparse => Self::sparse(),
            RewardMode::Dense => Self::dense(),
        }
    }
}

/// Reward for one decision's completed step. The terminal production
/// bonus rides on the transition whose step ends the episode.
pub fn step_reward(info: &StepInfo, config: &RewardConfig) -> f64 {
    let mut r = config.delta_tons_coef * (info.delta_tons + 1.0).ln()
        + config.wait_coef * info.wait_duration
        + config.service_coef * info.service_duration
        + config.jam_coef * info.jam_duration
        + config.move_coef * info.move_duration;
    if info.episode_done {
        r += config.final_tons_coef * info.final_tons;
    }
    r
}
