//! Feed-forward policy/value network with a masked categorical head,
//! analytic gradients, and an adaptive-moment optimizer.
//!
//! The net is small enough that everything is hand-rolled f64 math:
//! two tanh trunk layers, a logit head over target sites, a scalar value
//! head. Masking restricts the softmax normalizer to legal entries, so
//! illegal actions carry exactly zero probability and zero gradient.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(String),
}

pub const DEFAULT_HIDDEN: usize = 128;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// All learnable parameters plus optimizer state. Weight matrices are
/// row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub obs_dim: usize,
    pub hidden: usize,
    pub action_width: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub wp: Vec<f64>,
    pub bp: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub opt: AdamState,
    pub train_step: u64,
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// Log-probability per action slot; masked-out slots are -inf.
    pub log_probs: Vec<f64>,
    pub value: f64,
    pub entropy: f64,
}

fn gaussian(rng: &mut impl RngCore) -> f64 {
    // Box-Muller.
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// Orthogonal-style init: Gram-Schmidt over rows, restarting the block
// whenever the input dimension is exhausted, then scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl RngCore) -> Vec<f64> {
    let mut w = vec![0.0; rows * cols];
    let mut block_start = 0usize;
    for r in 0..rows {
        if r - block_start >= cols {
            block_start = r;
        }
        loop {
            let mut row: Vec<f64> = (0..cols).map(|_| gaussian(rng)).collect();
            for prev in block_start..r {
                let dot: f64 = (0..cols).map(|c| row[c] * w[prev * cols + c]).sum();
                for c in 0..cols {
                    row[c] -= dot * w[prev * cols + c];
                }
            }
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for c in 0..cols {
                    w[r * cols + c] = gain * row[c] / norm;
                }
                break;
            }
        }
    }
    w
}

impl PolicyParams {
    pub fn new(obs_dim: usize, action_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = orthogonal(hidden, obs_dim, 1.0, &mut rng);
        let w2 = orthogonal(hidden, hidden, 1.0, &mut rng);
        let wp = orthogonal(action_width, hidden, 0.01, &mut rng);
        let wv = orthogonal(1, hidden, 1.0, &mut rng);
        let shapes = [
            hidden * obs_dim,
            hidden,
            hidden * hidden,
            hidden,
            action_width * hidden,
            action_width,
            hidden,
            1,
        ];
        PolicyParams {
            obs_dim,
            hidden,
            action_width,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; hidden],
            wp,
            bp: vec![0.0; action_width],
            wv,
            bv: vec![0.0; 1],
            opt: AdamState {
                m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
                v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
                step: 0,
            },
            train_step: 0,
        }
    }

    pub fn param_slices(&self) -> [&[f64]; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.wp, &self.bp, &self.wv, &self.bv,
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wp,
            &mut self.bp,
            &mut self.wv,
            &mut self.bv,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn check_compat(&self, obs_dim: usize, action_width: usize) -> Result<(), PolicyError> {
        if self.obs_dim != obs_dim || self.action_width != action_width {
            return Err(PolicyError::ShapeMismatch(format!(
                "checkpoint is {}x{}, scenario needs {}x{}",
                self.obs_dim, self.action_width, obs_dim, action_width
            )));
        }
        Ok(())
    }
}

/// Gradients with the same shapes as [`PolicyParams::param_slices`].
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Grads(params.param_slices().iter().map(|s| vec![0.0; s.len()]).collect())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients in place so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for g in &mut self.0 {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
        norm
    }
}

struct ForwardCache {
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// Probabilities (0 for masked slots).
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    value: f64,
    entropy: f64,
}

fn matvec(w: &[f64], x: &[f64], b: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

fn forward_cache(params: &PolicyParams, obs: &[f64], mask: &[bool]) -> ForwardCache {
    let h = params.hidden;
    let a = params.action_width;
    let mut h1 = vec![0.0; h];
    matvec(&params.w1, obs, &params.b1, &mut h1);
    for x in &mut h1 {
        *x = x.tanh();
    }
    let mut h2 = vec![0.0; h];
    matvec(&params.w2, &h1, &params.b2, &mut h2);
    for x in &mut h2 {
        *x = x.tanh();
    }
    let mut logits = vec![0.0; a];
    matvec(&params.wp, &h2, &params.bp, &mut logits);
    let mut value = vec![0.0; 1];
    matvec(&params.wv, &h2, &params.bv, &mut value);

    // Log-softmax restricted to legal entries.
    let max_legal = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let normalizer: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| (z - max_legal).exp())
        .sum();
    let log_normalizer = max_legal + normalizer.ln();
    let mut probs = vec![0.0; a];
    let mut log_probs = vec![f64::NEG_INFINITY; a];
    let mut entropy = 0.0;
    for i in 0..a {
        if mask[i] {
            let lp = logits[i] - log_normalizer;
            log_probs[i] = lp;
            probs[i] = lp.exp();
            entropy -= probs[i] * lp;
        }
    }
    ForwardCache {
        h1,
        h2,
        probs,
        log_probs,
        value: value[0],
        entropy,
    }
}

/// Masked forward pass. Illegal actions get probability exactly 0.
pub fn forward(
    params: &PolicyParams,
    obs: &[f64],
    mask: &[bool],
) -> Result<PolicyOutput, PolicyError> {
    if obs.len() != params.obs_dim {
        return Err(PolicyError::ShapeMismatch(format!(
            "obs length {} != {}",
            obs.len(),
            params.obs_dim
        )));
    }
    if mask.len() != params.action_width {
        return Err(PolicyError::ShapeMismatch(format!(
            "mask length {} != {}",
            mask.len(),
            params.action_width
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(PolicyError::ShapeMismatch("mask has no legal action".into()));
    }
    let cache = forward_cache(params, obs, mask);
    Ok(PolicyOutput {
        log_probs: cache.log_probs,
        value: cache.value,
        entropy: cache.entropy,
    })
}

/// Samples a legal action; returns the action and its log-probability.
pub fn sample(
    params: &PolicyParams,
    obs: &[f64],
    mask: &[bool],
    rng: &mut impl RngCore,
) -> Result<(usize, f64), PolicyError> {
    let out = forward(params, obs, mask)?;
    Ok(sample_from(&out, mask, rng))
}

/// Samples from an already-computed forward output.
pub fn sample_from(
    out: &PolicyOutput,
    mask: &[bool],
    rng: &mut impl RngCore,
) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            last_legal = i;
            acc += out.log_probs[i].exp();
            if u < acc {
                return (i, out.log_probs[i]);
            }
        }
    }
    // Rounding left u just above the accumulated mass.
    (last_legal, out.log_probs[last_legal])
}

/// One element of a training minibatch.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub obs: Vec<f64>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
    pub teacher_action: Option<usize>,
}

/// Coefficients of the total loss:
/// clip + value_coef * value - entropy_coef * entropy - guide_coef * guide.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub guide_coef: f64,
}

/// Per-minibatch loss values and diagnostics (all means over the batch).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub guide_loss: f64,
    pub c_teacher: f64,
    pub kl: f64,
}

fn accumulate_stats(
    cache: &ForwardCache,
    sample: &BatchSample,
    spec: &LossSpec,
    stats: &mut LossStats,
) {
    let new_lp = cache.log_probs[sample.action];
    let ratio = (new_lp - sample.old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - spec.clip_eps, 1.0 + spec.clip_eps);
    stats.policy_loss += -(ratio * sample.advantage).min(clipped * sample.advantage);
    stats.value_loss += (cache.value - sample.ret).powi(2);
    stats.entropy += cache.entropy;
    stats.kl += sample.old_log_prob - new_lp;
    if let Some(t) = sample.teacher_action {
        stats.guide_loss += cache.log_probs[t];
        stats.c_teacher += cache.probs[t];
    }
}

fn finalize_stats(stats: &mut LossStats, n: usize, spec: &LossSpec) {
    let inv = 1.0 / n as f64;
    stats.policy_loss *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
    stats.guide_loss *= inv;
    stats.c_teacher *= inv;
    stats.kl *= inv;
    stats.total = stats.policy_loss + spec.value_coef * stats.value_loss
        - spec.entropy_coef * stats.entropy
        - spec.guide_coef * stats.guide_loss;
}

/// Total loss without gradients; the reference path for gradient checks.
pub fn evaluate_batch(
    params: &PolicyParams,
    batch: &[BatchSample],
    spec: &LossSpec,
) -> LossStats {
    let mut stats = LossStats::default();
    for s in batch {
        let cache = forward_cache(params, &s.obs, &s.mask);
        accumulate_stats(&cache, s, spec, &mut stats);
    }
    finalize_stats(&mut stats, batch.len(), spec);
    stats
}

/// Analytic gradients of the total loss over a minibatch.
pub fn gradients(
    params: &PolicyParams,
    batch: &[BatchSample],
    spec: &LossSpec,
) -> Result<(Grads, LossStats), PolicyError> {
    let h = params.hidden;
    let a = params.action_width;
    let mut grads = Grads::zeros_like(params);
    let mut stats = LossStats::default();
    let inv_n = 1.0 / batch.len() as f64;

    for s in batch {
        if s.obs.len() != params.obs_dim || s.mask.len() != a {
            return Err(PolicyError::ShapeMismatch(
                "batch sample does not match network dims".into(),
            ));
        }
        let cache = forward_cache(params, &s.obs, &s.mask);
        accumulate_stats(&cache, s, spec, &mut stats);

        // d(total)/d(logits). Masked slots keep zero gradient.
        let mut dz = vec![0.0; a];

        // Clipped surrogate: gradient flows only when the unclipped branch
        // is active (min picks ratio*A, or ratio is inside the clip range).
        let new_lp = cache.log_probs[s.action];
        let ratio = (new_lp - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - spec.clip_eps, 1.0 + spec.clip_eps) * s.advantage;
        if unclipped <= clipped {
            let coeff = -unclipped * inv_n; // d/d(new_lp)
            for j in 0..a {
                if s.mask[j] {
                    let ind = if j == s.action { 1.0 } else { 0.0 };
                    dz[j] += coeff * (ind - cache.probs[j]);
                }
            }
        }

        // Entropy bonus: total has -entropy_coef * mean(H).
        if spec.entropy_coef != 0.0 {
            for j in 0..a {
                if s.mask[j] {
                    let p = cache.probs[j];
                    if p > 0.0 {
                        dz[j] += spec.entropy_coef * inv_n * p * (p.ln() + cache.entropy);
                    }
                }
            }
        }

        // Guidance: total has -guide_coef * mean(log pi(teacher)).
        if spec.guide_coef != 0.0 {
            if let Some(t) = s.teacher_action {
                let coeff = -spec.guide_coef * inv_n;
                for j in 0..a {
                    if s.mask[j] {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        dz[j] += coeff * (ind - cache.probs[j]);
                    }
                }
            }
        }

        // Value MSE.
        let dv = spec.value_coef * 2.0 * (cache.value - s.ret) * inv_n;

        // Backprop through heads into the trunk.
        let mut dh2 = vec![0.0; h];
        for j in 0..a {
            if dz[j] != 0.0 {
                let row = &params.wp[j * h..(j + 1) * h];
                for (c, wi) in row.iter().enumerate() {
                    dh2[c] += dz[j] * wi;
                }
                for c in 0..h {
                    grads.0[4][j * h + c] += dz[j] * cache.h2[c];
                }
                grads.0[5][j] += dz[j];
            }
        }
        if dv != 0.0 {
            for c in 0..h {
                dh2[c] += dv * params.wv[c];
                grads.0[6][c] += dv * cache.h2[c];
            }
            grads.0[7][0] += dv;
        }

        let mut dh1 = vec![0.0; h];
        for r in 0..h {
            let da = dh2[r] * (1.0 - cache.h2[r] * cache.h2[r]);
            if da != 0.0 {
                let row = &params.w2[r * h..(r + 1) * h];
                for (c, wi) in row.iter().enumerate() {
                    dh1[c] += da * wi;
                    grads.0[2][r * h + c] += da * cache.h1[c];
                }
                grads.0[3][r] += da;
            }
        }
        for r in 0..h {
            let da = dh1[r] * (1.0 - cache.h1[r] * cache.h1[r]);
            if da != 0.0 {
                for (c, &xi) in s.obs.iter().enumerate() {
                    grads.0[0][r * params.obs_dim + c] += da * xi;
                }
                grads.0[1][r] += da;
            }
        }
    }
    finalize_stats(&mut stats, batch.len(), spec);
    Ok((grads, stats))
}

/// Adam update (beta1=0.9, beta2=0.999, eps=1e-8) with bias correction.
pub fn optimizer_step(params: &mut PolicyParams, grads: &Grads, lr: f64) {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    params.opt.step += 1;
    let t = params.opt.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let mut m = std::mem::take(&mut params.opt.m);
    let mut v = std::mem::take(&mut params.opt.v);
    for (i, slice) in params.param_slices_mut().into_iter().enumerate() {
        let g = &grads.0[i];
        for (j, p) in slice.iter_mut().enumerate() {
            m[i][j] = BETA1 * m[i][j] + (1.0 - BETA1) * g[j];
            v[i][j] = BETA2 * v[i][j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[i][j] / bc1;
            let v_hat = v[i][j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    params.opt.m = m;
    params.opt.v = v;
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    params: PolicyParams,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &PolicyParams) -> Result<(), PolicyError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| PolicyError::Io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| PolicyError::Io(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams, PolicyError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| PolicyError::Io(format!("{}: {e}", path.as_ref().display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| PolicyError::Io(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Io(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    Ok(file.params)
}

use std::path::Path;
