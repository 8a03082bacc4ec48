//! Rollout collection and PPO optimization with time-delta-corrected
//! TD/GAE, a clipped surrogate objective, and adaptive teacher guidance.
//!
//! Decision intervals in the mine are non-uniform, so gamma and lambda
//! are per-minute rates raised to the elapsed minutes between decisions
//! rather than to a step count.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dispatchers::teacher_action;
use crate::obs::{self, ActionMask, Observation};
use crate::policy::{
    self, BatchSample, LossSpec, PolicyError, PolicyParams, DEFAULT_HIDDEN,
};
use crate::reward::{step_reward, RewardConfig};
use crate::scenario::ScenarioConfig;
use crate::sim::{self, EpisodeMetrics, SimState, StepOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("rollout buffer is not sealed")]
    UnsealedBuffer,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(String),
}

/// How the GAE decay exponent treats non-uniform intervals.
///
/// `CumulativeElapsed` (default) discounts each delta by the total time
/// elapsed since the advantage's anchor decision. `PerStepPower` keeps
/// the literal published form, raising each step's own interval decay to
/// the power of its offset; the two agree when intervals are constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GaeVariant {
    #[default]
    CumulativeElapsed,
    PerStepPower,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Discount per minute.
    pub gamma: f64,
    /// GAE trace decay per minute.
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    /// Decisions collected per update.
    pub rollout_len: usize,
    /// Guidance scale alpha.
    pub alpha: f64,
    /// Production threshold that switches guidance off; resolved to the
    /// teacher's own tonnage when unset and training is guided.
    pub base_tons: Option<f64>,
    pub advantage_norm: bool,
    pub max_grad_norm: f64,
    pub gae_variant: GaeVariant,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            rollout_len: 2048,
            alpha: 0.5,
            base_tons: None,
            advantage_norm: true,
            max_grad_norm: 0.5,
            gae_variant: GaeVariant::CumulativeElapsed,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// One logged decision.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub mask: ActionMask,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Minutes until the next decision (or episode end for terminals).
    pub delta_t: f64,
    pub done: bool,
    pub teacher_action: Option<usize>,
}

/// Per-worker transition streams plus advantages computed at seal time.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    workers: Vec<Vec<Transition>>,
    bootstrap_values: Vec<f64>,
    sealed: bool,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(workers: usize) -> Self {
        RolloutBuffer {
            workers: vec![Vec::new(); workers],
            ..Default::default()
        }
    }

    pub fn push(&mut self, worker: usize, transition: Transition) {
        debug_assert!(!self.sealed);
        self.workers[worker].push(transition);
    }

    pub fn len(&self) -> usize {
        self.workers.iter().map(|w| w.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seals the buffer with one bootstrap value per worker (the value of
    /// the state following that worker's last transition; ignored when the
    /// last transition is terminal).
    pub fn seal(&mut self, bootstrap_values: Vec<f64>) {
        debug_assert_eq!(bootstrap_values.len(), self.workers.len());
        self.bootstrap_values = bootstrap_values;
        self.sealed = true;
    }

    pub fn advantages(&self) -> &[f64] {
        &self.advantages
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    fn flat_transitions(&self) -> impl Iterator<Item = &Transition> {
        self.workers.iter().flatten()
    }
}

/// Delta-t discounted one-step TD target.
pub fn td_target(reward: f64, gamma: f64, delta_t: f64, next_value: f64, done: bool) -> f64 {
    if done {
        reward
    } else {
        reward + gamma.powf(delta_t) * next_value
    }
}

/// Computes advantages and returns for a sealed buffer.
///
/// Backward recursion per worker stream:
/// `A_t = delta_t + (gamma*lambda)^{dt_t} * (1 - done_t) * A_{t+1}` with
/// `delta_t = r_t + gamma^{dt_t} * V_{t+1} * (1 - done_t) - V_t`.
pub fn compute_gae(buffer: &mut RolloutBuffer, config: &TrainConfig) -> Result<(), TrainError> {
    if !buffer.sealed {
        return Err(TrainError::UnsealedBuffer);
    }
    let mut advantages = Vec::with_capacity(buffer.len());
    let mut returns = Vec::with_capacity(buffer.len());
    for (w, stream) in buffer.workers.iter().enumerate() {
        let n = stream.len();
        let mut adv = vec![0.0; n];
        match config.gae_variant {
            GaeVariant::CumulativeElapsed => {
                let mut next_value = buffer.bootstrap_values.get(w).copied().unwrap_or(0.0);
                let mut next_adv = 0.0;
                for t in (0..n).rev() {
                    let tr = &stream[t];
                    let cont = if tr.done { 0.0 } else { 1.0 };
                    let delta =
                        tr.reward + config.gamma.powf(tr.delta_t) * next_value * cont - tr.value;
                    adv[t] = delta
                        + (config.gamma * config.lambda).powf(tr.delta_t) * cont * next_adv;
                    next_adv = adv[t];
                    next_value = tr.value;
                }
            }
            GaeVariant::PerStepPower => {
                // Literal published form: each delta is weighted by its own
                // interval decay raised to the offset l.
                let deltas: Vec<f64> = (0..n)
                    .map(|t| {
                        let tr = &stream[t];
                        let cont = if tr.done { 0.0 } else { 1.0 };
                        let next_value = if t + 1 < n {
                            stream[t + 1].value
                        } else {
                            buffer.bootstrap_values.get(w).copied().unwrap_or(0.0)
                        };
                        tr.reward + config.gamma.powf(tr.delta_t) * next_value * cont - tr.value
                    })
                    .collect();
                for t in 0..n {
                    let mut acc = 0.0;
                    for (l, u) in (t..n).enumerate() {
                        let decay = (config.gamma * config.lambda).powf(stream[u].delta_t);
                        acc += decay.powi(l as i32) * deltas[u];
                        if stream[u].done {
                            break;
                        }
                    }
                    adv[t] = acc;
                }
            }
        }
        for (t, a) in adv.into_iter().enumerate() {
            returns.push(a + stream[t].value);
            advantages.push(a);
        }
    }
    if config.advantage_norm && advantages.len() > 1 {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for a in &mut advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    buffer.advantages = advantages;
    buffer.returns = returns;
    Ok(())
}

/// Mean probability the policy assigns to the teacher's actions.
pub fn c_teacher(teacher_probs: &[f64]) -> f64 {
    if teacher_probs.is_empty() {
        return 0.0;
    }
    teacher_probs.iter().sum::<f64>() / teacher_probs.len() as f64
}

/// Mean log-likelihood of the teacher's actions.
pub fn guide_loss(teacher_log_probs: &[f64]) -> f64 {
    if teacher_log_probs.is_empty() {
        return 0.0;
    }
    teacher_log_probs.iter().sum::<f64>() / teacher_log_probs.len() as f64
}

/// Acceptance of the teacher and the production latch.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceState {
    pub c_teacher: f64,
    pub guide_coef: f64,
    pub last_episode_tons: f64,
    pub active: bool,
}

impl GuidanceState {
    pub fn new() -> Self {
        GuidanceState {
            c_teacher: 0.0,
            guide_coef: 0.0,
            last_episode_tons: 0.0,
            active: true,
        }
    }
}

impl Default for GuidanceState {
    fn default() -> Self {
        Self::new()
    }
}

/// Adaptive guidance coefficient: `alpha * (1 - c_teacher)` while below
/// the production baseline, 0 (latched permanently) once `tons` reaches
/// `base_tons`.
pub fn guide_coef(
    tons: f64,
    base_tons: f64,
    alpha: f64,
    c_teacher: f64,
    state: &mut GuidanceState,
) -> f64 {
    state.c_teacher = c_teacher;
    state.last_episode_tons = tons;
    if !state.active {
        state.guide_coef = 0.0;
        return 0.0;
    }
    if tons >= base_tons {
        state.active = false;
        state.guide_coef = 0.0;
        return 0.0;
    }
    state.guide_coef = alpha * (1.0 - c_teacher);
    state.guide_coef
}

/// Aggregated statistics of one `update` call (means over minibatches).
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub c_teacher: f64,
    pub guide_coef: f64,
    pub minibatches: usize,
}

/// PPO epochs over shuffled minibatches. With guidance, the coefficient
/// is recomputed per minibatch from that minibatch's current c_teacher.
pub fn update(
    buffer: &RolloutBuffer,
    params: &mut PolicyParams,
    config: &TrainConfig,
    mut guidance: Option<&mut GuidanceState>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, TrainError> {
    if !buffer.sealed || buffer.advantages.len() != buffer.len() {
        return Err(TrainError::UnsealedBuffer);
    }
    let samples: Vec<BatchSample> = buffer
        .flat_transitions()
        .zip(buffer.advantages.iter().zip(&buffer.returns))
        .map(|(tr, (&adv, &ret))| BatchSample {
            obs: tr.obs.clone(),
            mask: tr.mask.clone(),
            action: tr.action,
            old_log_prob: tr.log_prob,
            advantage: adv,
            ret,
            teacher_action: tr.teacher_action,
        })
        .collect();

    let mut stats = UpdateStats::default();
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(config.minibatch_size.max(1)) {
            let batch: Vec<BatchSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let mut spec = LossSpec {
                clip_eps: config.clip_eps,
                value_coef: config.value_coef,
                entropy_coef: config.entropy_coef,
                guide_coef: 0.0,
            };
            if let Some(state) = guidance.as_deref_mut() {
                let base = config
                    .base_tons
                    .expect("guided training requires a resolved base_tons");
                // Probe the current policy's acceptance on this minibatch.
                let probe = policy::evaluate_batch(params, &batch, &spec);
                spec.guide_coef = guide_coef(
                    state.last_episode_tons,
                    base,
                    config.alpha,
                    probe.c_teacher,
                    state,
                );
            }
            let (mut grads, loss) = policy::gradients(params, &batch, &spec)?;
            grads.clip_global_norm(config.max_grad_norm);
            policy::optimizer_step(params, &grads, config.learning_rate);

            stats.policy_loss += loss.policy_loss;
            stats.value_loss += loss.value_loss;
            stats.entropy += loss.entropy;
            stats.kl += loss.kl;
            stats.c_teacher += loss.c_teacher;
            stats.guide_coef += spec.guide_coef;
            stats.minibatches += 1;
        }
    }
    let inv = 1.0 / stats.minibatches.max(1) as f64;
    stats.policy_loss *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
    stats.kl *= inv;
    stats.c_teacher *= inv;
    stats.guide_coef *= inv;
    Ok(stats)
}

// One environment worker: its own simulator, action rng, and episode
// seed sequence.
struct EnvWorker {
    state: SimState,
    pending: Option<sim::DispatchRequest>,
    rng: ChaCha8Rng,
    seed_base: u64,
    episodes_started: u64,
    last_episode_tons: Option<f64>,
}

impl EnvWorker {
    fn new(config: &ScenarioConfig, seed_base: u64) -> Self {
        let (state, request) = sim::reset(config, seed_base);
        EnvWorker {
            state,
            pending: Some(request),
            rng: ChaCha8Rng::seed_from_u64(seed_base ^ 0x9e3779b97f4a7c15),
            seed_base,
            episodes_started: 1,
            last_episode_tons: None,
        }
    }

    fn reset_episode(&mut self, config: &ScenarioConfig) {
        let seed = self.seed_base.wrapping_add(self.episodes_started);
        self.episodes_started += 1;
        let (state, request) = sim::reset(config, seed);
        self.state = state;
        self.pending = Some(request);
    }

    /// Collects one transition, resetting first if the episode is over.
    fn collect_one(
        &mut self,
        config: &ScenarioConfig,
        params: &PolicyParams,
        reward_config: &RewardConfig,
        guided: bool,
    ) -> Result<Transition, TrainError> {
        if self.pending.is_none() {
            self.reset_episode(config);
        }
        let request = self.pending.expect("pending after reset");
        let observation = obs::encode(&self.state, &request);
        let mask = obs::mask(&self.state, &request);
        let out = policy::forward(params, &observation, &mask)?;
        let (action, log_prob) = policy::sample_from(&out, &mask, &mut self.rng);
        let teacher = guided.then(|| teacher_action(&self.state, &request));

        let (outcome, info) = self
            .state
            .step(action)
            .expect("sampled action is legal and episode is live");
        let reward = step_reward(&info, reward_config);
        let (delta_t, done) = match &outcome {
            StepOutcome::Request(r) => (r.clock - request.clock, false),
            StepOutcome::EpisodeEnd => (self.state.clock() - request.clock, true),
        };
        match outcome {
            StepOutcome::Request(r) => self.pending = Some(r),
            StepOutcome::EpisodeEnd => {
                self.last_episode_tons = Some(self.state.produced_tons());
                self.pending = None;
            }
        }
        Ok(Transition {
            obs: observation,
            mask,
            action,
            log_prob,
            value: out.value,
            reward,
            delta_t,
            done,
            teacher_action: teacher,
        })
    }

    /// Value bootstrap for the state after this worker's last transition.
    fn bootstrap_value(&self, params: &PolicyParams) -> Result<f64, TrainError> {
        match self.pending {
            None => Ok(0.0),
            Some(request) => {
                let observation = obs::encode(&self.state, &request);
                let mask = obs::mask(&self.state, &request);
                Ok(policy::forward(params, &observation, &mask)?.value)
            }
        }
    }
}

/// Runs one full episode under a rule-based dispatcher.
pub fn run_dispatcher_episode(
    config: &ScenarioConfig,
    kind: crate::dispatchers::DispatcherKind,
    seed: u64,
) -> EpisodeMetrics {
    let (mut state, first) = sim::reset(config, seed);
    let mut dispatcher = crate::dispatchers::Dispatcher::new(kind, config, seed);
    let mut pending = Some(first);
    while let Some(request) = pending {
        let action = dispatcher.decide(&state, &request);
        pending = match state.step(action).expect("dispatcher actions are legal").0 {
            StepOutcome::Request(r) => Some(r),
            StepOutcome::EpisodeEnd => None,
        };
    }
    state.compute_metrics().expect("episode finished")
}

/// Summary of a training run.
#[derive(Debug)]
pub struct TrainReport {
    pub steps: u64,
    pub episodes: u64,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub params: PolicyParams,
    pub base_tons: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "step,episode,produced_tons,mean_reward,c_teacher,guide_coef,policy_loss,value_loss,entropy,kl";

/// Full training loop: alternating rollout collection across workers and
/// PPO updates, logging metrics per update and checkpointing to `out_dir`.
/// An existing compatible checkpoint in `out_dir` is resumed from.
pub fn train(
    scenario: &ScenarioConfig,
    reward_config: &RewardConfig,
    config: &TrainConfig,
    guided: bool,
    total_steps: u64,
    seed: u64,
    workers: usize,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io(e.to_string()))?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let metrics_path = out_dir.join("metrics.csv");

    let obs_dim = obs::obs_dim(scenario.num_load_sites, scenario.num_dump_sites);
    let action_width = scenario.action_width();

    let mut params = if checkpoint_path.exists() {
        let p = policy::load_checkpoint(&checkpoint_path)?;
        p.check_compat(obs_dim, action_width)?;
        log::info!("resuming from {} at step {}", checkpoint_path.display(), p.train_step);
        p
    } else {
        PolicyParams::new(obs_dim, action_width, config.hidden, seed)
    };

    // Resolve base_tons from the teacher's own performance when unset.
    let mut config = config.clone();
    if guided && config.base_tons.is_none() {
        let teacher =
            run_dispatcher_episode(scenario, crate::dispatchers::DispatcherKind::Sptf, seed);
        config.base_tons = Some(teacher.produced_tons);
        log::info!("base_tons resolved to teacher tonnage {}", teacher.produced_tons);
    }

    let mut metrics = std::fs::File::create(&metrics_path)
        .map_err(|e| TrainError::Io(e.to_string()))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| TrainError::Io(e.to_string()))?;

    let workers_n = workers.max(1);
    let mut envs: Vec<EnvWorker> = (0..workers_n)
        .map(|w| EnvWorker::new(scenario, seed.wrapping_add(w as u64 * 1_000_003)))
        .collect();
    let mut update_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517cc1b727220a95);
    let mut guidance = guided.then(GuidanceState::new);

    let mut steps: u64 = params.train_step;
    let mut episodes: u64 = 0;
    let per_worker = (config.rollout_len / workers_n).max(1);

    while steps < total_steps {
        let mut buffer = RolloutBuffer::new(workers_n);
        let mut reward_sum = 0.0;
        for (w, env) in envs.iter_mut().enumerate() {
            for _ in 0..per_worker {
                let tr = env.collect_one(scenario, &params, reward_config, guided)?;
                reward_sum += tr.reward;
                if tr.done {
                    episodes += 1;
                }
                buffer.push(w, tr);
            }
        }
        let bootstrap: Vec<f64> = envs
            .iter()
            .map(|e| e.bootstrap_value(&params))
            .collect::<Result<_, _>>()?;
        let collected = buffer.len() as u64;
        buffer.seal(bootstrap);
        compute_gae(&mut buffer, &config)?;

        // Guidance reads the best recently completed episode tonnage.
        let last_tons = envs
            .iter()
            .filter_map(|e| e.last_episode_tons)
            .fold(0.0f64, f64::max);
        if let Some(state) = guidance.as_mut() {
            state.last_episode_tons = last_tons;
        }
        let stats = update(&buffer, &mut params, &config, guidance.as_mut(), &mut update_rng)?;

        steps += collected;
        params.train_step = steps;
        let mean_reward = reward_sum / collected as f64;
        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{},{}",
            steps,
            episodes,
            last_tons,
            mean_reward,
            stats.c_teacher,
            stats.guide_coef,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.kl
        )
        .map_err(|e| TrainError::Io(e.to_string()))?;
        policy::save_checkpoint(&checkpoint_path, &params)?;
        log::debug!(
            "step {steps}: tons {last_tons:.1} guide_coef {:.4} c_teacher {:.4}",
            stats.guide_coef,
            stats.c_teacher
        );
    }

    Ok(TrainReport {
        steps,
        episodes,
        checkpoint_path,
        metrics_path,
        params,
        base_tons: config.base_tons,
    })
}

/// Greedy (argmax) evaluation, one episode per seed.
pub fn evaluate(
    params: &PolicyParams,
    scenario: &ScenarioConfig,
    seeds: &[u64],
) -> Result<Vec<EpisodeMetrics>, TrainError> {
    let obs_dim = obs::obs_dim(scenario.num_load_sites, scenario.num_dump_sites);
    params.check_compat(obs_dim, scenario.action_width())?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut state, first) = sim::reset(scenario, seed);
        let mut pending = Some(first);
        while let Some(request) = pending {
            let observation = obs::encode(&state, &request);
            let mask = obs::mask(&state, &request);
            let out = policy::forward(params, &observation, &mask)?;
            let action = out
                .log_probs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask[*i])
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("at least one legal action");
            pending = match state.step(action).expect("argmax action is legal").0 {
                StepOutcome::Request(r) => Some(r),
                StepOutcome::EpisodeEnd => None,
            };
        }
        results.push(state.compute_metrics().expect("episode finished"));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardConfig;
    use crate::scenario::reduced_scenario;
    use rand::Rng;

    #[test]
    fn td_target_examples() {
        assert_eq!(td_target(1.0, 0.99, 1.0, 2.0, false), 1.0 + 0.99 * 2.0);
        assert_eq!(td_target(1.0, 0.99, 0.0, 2.0, false), 3.0);
        let v = td_target(1.0, 0.99, 2.5, 2.0, false);
        assert!((v - (1.0 + (2.5 * 0.99f64.ln()).exp() * 2.0)).abs() < 1e-12);
        assert!((v - 2.95037).abs() < 1e-5);
        assert_eq!(td_target(1.0, 0.99, 5.0, 2.0, true), 1.0);
    }

    fn synthetic_buffer(
        rng: &mut ChaCha8Rng,
        n: usize,
        dts: &[f64],
        force_terminal: bool,
    ) -> RolloutBuffer {
        let mut buffer = RolloutBuffer::new(1);
        for t in 0..n {
            let done = if t == n - 1 {
                force_terminal
            } else {
                rng.gen_bool(0.1)
            };
            buffer.push(
                0,
                Transition {
                    obs: vec![],
                    mask: vec![],
                    action: 0,
                    log_prob: 0.0,
                    value: rng.gen_range(-1.0..1.0),
                    reward: rng.gen_range(-1.0..1.0),
                    delta_t: dts[rng.gen_range(0..dts.len())],
                    done,
                    teacher_action: None,
                },
            );
        }
        buffer.seal(vec![rng.gen_range(-1.0..1.0)]);
        buffer
    }

    /// Explicit double-loop oracle with cumulative-elapsed-time exponents.
    fn gae_oracle(buffer: &RolloutBuffer, gamma: f64, lambda: f64) -> Vec<f64> {
        let stream = &buffer.workers[0];
        let n = stream.len();
        let delta = |t: usize| {
            let tr = &stream[t];
            let cont = if tr.done { 0.0 } else { 1.0 };
            let next_value = if t + 1 < n {
                stream[t + 1].value
            } else {
                buffer.bootstrap_values[0]
            };
            tr.reward + gamma.powf(tr.delta_t) * next_value * cont - tr.value
        };
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                let mut elapsed = 0.0;
                for u in t..n {
                    acc += (gamma * lambda).powf(elapsed) * delta(u);
                    if stream[u].done {
                        break;
                    }
                    elapsed += stream[u].delta_t;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn gae_matches_cumulative_elapsed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = TrainConfig {
            advantage_norm: false,
            ..TrainConfig::default()
        };
        for _ in 0..50 {
            let n = rng.gen_range(1..=64);
            let mut buffer = synthetic_buffer(&mut rng, n, &[0.5, 1.0, 3.0], false);
            compute_gae(&mut buffer, &config).unwrap();
            let oracle = gae_oracle(&buffer, config.gamma, config.lambda);
            for (a, b) in buffer.advantages().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    /// Textbook uniform-step GAE, written independently of compute_gae.
    fn standard_gae(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let n = rewards.len();
        let mut adv = vec![0.0; n];
        let mut last = 0.0;
        for t in (0..n).rev() {
            let nv = if t + 1 < n { values[t + 1] } else { bootstrap };
            let cont = if dones[t] { 0.0 } else { 1.0 };
            let delta = rewards[t] + gamma * nv * cont - values[t];
            last = delta + gamma * lambda * cont * last;
            adv[t] = last;
        }
        adv
    }

    #[test]
    fn uniform_dt_reduces_to_standard_gae() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = TrainConfig {
            advantage_norm: false,
            ..TrainConfig::default()
        };
        for _ in 0..100 {
            let n = rng.gen_range(1..=32);
            let mut buffer = synthetic_buffer(&mut rng, n, &[1.0], false);
            compute_gae(&mut buffer, &config).unwrap();
            let stream = &buffer.workers[0];
            let rewards: Vec<f64> = stream.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = stream.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = stream.iter().map(|t| t.done).collect();
            let expected = standard_gae(
                &rewards,
                &values,
                &dones,
                buffer.bootstrap_values[0],
                config.gamma,
                config.lambda,
            );
            for (a, b) in buffer.advantages().iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monte_carlo_case() {
        // lambda=1, gamma=1, rewards [1,1,1], zero values, terminal end.
        let mut buffer = RolloutBuffer::new(1);
        for t in 0..3 {
            buffer.push(
                0,
                Transition {
                    obs: vec![],
                    mask: vec![],
                    action: 0,
                    log_prob: 0.0,
                    value: 0.0,
                    reward: 1.0,
                    delta_t: 1.0,
                    done: t == 2,
                    teacher_action: None,
                },
            );
        }
        buffer.seal(vec![0.0]);
        let config = TrainConfig {
            gamma: 1.0,
            lambda: 1.0,
            advantage_norm: false,
            ..TrainConfig::default()
        };
        let mut b = buffer;
        compute_gae(&mut b, &config).unwrap();
        assert_eq!(b.advantages(), &[3.0, 2.0, 1.0]);
        assert_eq!(b.returns(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn literal_variant_agrees_on_constant_intervals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &dt in &[0.5, 1.0, 2.0] {
            let mut a = synthetic_buffer(&mut rng, 16, &[dt], true);
            let mut b = a.clone();
            let rec = TrainConfig { advantage_norm: false, ..TrainConfig::default() };
            let lit = TrainConfig {
                advantage_norm: false,
                gae_variant: GaeVariant::PerStepPower,
                ..TrainConfig::default()
            };
            compute_gae(&mut a, &rec).unwrap();
            compute_gae(&mut b, &lit).unwrap();
            for (x, y) in a.advantages().iter().zip(b.advantages()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unsealed_buffer_is_rejected() {
        let mut buffer = RolloutBuffer::new(1);
        buffer.push(
            0,
            Transition {
                obs: vec![],
                mask: vec![],
                action: 0,
                log_prob: 0.0,
                value: 0.0,
                reward: 0.0,
                delta_t: 1.0,
                done: false,
                teacher_action: None,
            },
        );
        let config = TrainConfig::default();
        assert!(matches!(
            compute_gae(&mut buffer, &config),
            Err(TrainError::UnsealedBuffer)
        ));
    }

    #[test]
    fn guide_loss_and_c_teacher_examples() {
        assert_eq!(guide_loss(&[0.0, 0.0]), 0.0); // log 1 everywhere
        let gl = guide_loss(&[0.5f64.ln(), 0.25f64.ln()]);
        assert!((gl - (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!((gl + 1.0397).abs() < 1e-4);

        assert_eq!(c_teacher(&[1.0, 1.0, 1.0]), 1.0);
        assert!((c_teacher(&[0.5, 0.25]) - 0.375).abs() < 1e-12);
        assert!((c_teacher(&[0.2; 5]) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn guide_coef_latches_at_base_tons() {
        let mut state = GuidanceState::new();
        assert!((guide_coef(50.0, 100.0, 0.5, 0.2, &mut state) - 0.4).abs() < 1e-12);
        assert!(state.active);
        // Fully converged to the teacher: coefficient vanishes.
        assert_eq!(guide_coef(50.0, 100.0, 0.5, 1.0, &mut state), 0.0);
        assert!(state.active);
        // Hitting the baseline deactivates permanently.
        assert_eq!(guide_coef(100.0, 100.0, 0.5, 0.2, &mut state), 0.0);
        assert!(!state.active);
        assert_eq!(guide_coef(10.0, 100.0, 0.5, 0.0, &mut state), 0.0);
    }

    fn collect_real_buffer(
        scenario: &ScenarioConfig,
        params: &PolicyParams,
        n: usize,
        guided: bool,
        seed: u64,
    ) -> RolloutBuffer {
        let reward = RewardConfig::dense();
        let mut env = EnvWorker::new(scenario, seed);
        let mut buffer = RolloutBuffer::new(1);
        for _ in 0..n {
            let tr = env.collect_one(scenario, params, &reward, guided).unwrap();
            buffer.push(0, tr);
        }
        let boot = env.bootstrap_value(params).unwrap();
        buffer.seal(vec![boot]);
        buffer
    }

    #[test]
    fn update_with_inactive_guidance_matches_unguided() {
        let scenario = reduced_scenario(2, 2, 4, 60.0).unwrap();
        let obs_dim = obs::obs_dim(2, 2);
        let params0 = PolicyParams::new(obs_dim, 2, 16, 1);
        let config = TrainConfig {
            minibatch_size: 32,
            base_tons: Some(0.0), // guidance latches off immediately
            ..TrainConfig::default()
        };
        let mut buffer = collect_real_buffer(&scenario, &params0, 64, true, 3);
        compute_gae(&mut buffer, &config).unwrap();

        let mut guided_params = params0.clone();
        let mut state = GuidanceState::new();
        state.last_episode_tons = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stats = update(&buffer, &mut guided_params, &config, Some(&mut state), &mut rng)
            .unwrap();
        assert_eq!(stats.guide_coef, 0.0);

        let mut plain_params = params0.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        update(&buffer, &mut plain_params, &config, None, &mut rng).unwrap();
        assert_eq!(guided_params, plain_params);
    }

    #[test]
    fn guidance_dominant_updates_raise_c_teacher() {
        let scenario = reduced_scenario(2, 2, 4, 60.0).unwrap();
        let obs_dim = obs::obs_dim(2, 2);
        let mut params = PolicyParams::new(obs_dim, 2, 16, 2);
        let config = TrainConfig {
            minibatch_size: 64,
            epochs: 1,
            alpha: 4.0,
            base_tons: Some(f64::INFINITY),
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut buffer = collect_real_buffer(&scenario, &params, 64, true, 5);
        compute_gae(&mut buffer, &config).unwrap();
        let mut state = GuidanceState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut prev = -1.0;
        for i in 0..20 {
            let stats = update(&buffer, &mut params, &config, Some(&mut state), &mut rng).unwrap();
            assert!(stats.c_teacher >= 0.0 && stats.c_teacher <= 1.0);
            assert!(stats.guide_coef >= 0.0 && stats.guide_coef <= config.alpha);
            assert!(
                stats.c_teacher >= prev - 1e-6,
                "c_teacher dropped at step {i}: {prev} -> {}",
                stats.c_teacher
            );
            prev = stats.c_teacher;
        }
        assert!(prev > 0.5, "c_teacher only reached {prev}");
    }

    #[test]
    fn train_smoke_is_deterministic_and_logs_metrics() {
        let scenario = reduced_scenario(1, 1, 2, 30.0).unwrap();
        let config = TrainConfig {
            rollout_len: 32,
            minibatch_size: 32,
            epochs: 2,
            hidden: 8,
            ..TrainConfig::default()
        };
        let run = |dir: &Path| {
            let report = train(
                &scenario,
                &RewardConfig::dense(),
                &config,
                true,
                64,
                11,
                2,
                dir,
            )
            .unwrap();
            std::fs::read_to_string(&report.metrics_path).unwrap()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = run(d1.path());
        let m2 = run(d2.path());
        assert_eq!(m1, m2);
        assert!(m1.starts_with(METRICS_HEADER));
        assert!(m1.lines().count() >= 2);
    }

    #[test]
    fn evaluate_is_deterministic_and_runs_on_minimal_fleet() {
        let scenario = reduced_scenario(1, 1, 1, 20.0).unwrap();
        let params = PolicyParams::new(obs_dim_of(&scenario), scenario.action_width(), 8, 3);
        let a = evaluate(&params, &scenario, &[0, 1]).unwrap();
        let b = evaluate(&params, &scenario, &[0, 1]).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
            assert!(x.produced_tons >= 0.0);
        }
    }

    #[test]
    fn evaluate_rejects_incompatible_checkpoint() {
        let scenario = reduced_scenario(2, 2, 2, 20.0).unwrap();
        let params = PolicyParams::new(10, 2, 8, 3);
        assert!(evaluate(&params, &scenario, &[0]).is_err());
    }

    fn obs_dim_of(scenario: &ScenarioConfig) -> usize {
        obs::obs_dim(scenario.num_load_sites, scenario.num_dump_sites)
    }
}
