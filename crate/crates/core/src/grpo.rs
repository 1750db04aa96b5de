//! Group relative policy optimization: advantages, ratios, the asymmetrically
//! clipped surrogate, the low-variance KL penalty and the assembled loss.
//!
//! For a group of `G` rollouts sampled from the old policy, the objective is
//!
//! ```text
//! J = 1/G Σ_i 1/|o_i| Σ_t [ min(r_it A_i, clip(r_it, 1-ε_low, 1+ε_high) A_i) - β KL_it ]
//! r_it = π_θ(o_it) / π_old(o_it)
//! A_i  = (R_i - mean(R)) / (std(R) + eps)        population std
//! KL_it = u - ln u - 1,  u = π_ref(o_it) / π_θ(o_it)
//! ```
//!
//! The loss is `-J` averaged over groups. Every token of a rollout shares the
//! rollout's advantage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("degenerate group: advantages need at least 2 rewards, got {0}")]
    DegenerateGroup(usize),
    #[error("empty response in group '{0}'")]
    EmptyResponse(String),
    #[error("rollout {index} of group '{group}' has mismatched log-probability lengths")]
    LengthMismatch { group: String, index: usize },
    #[error("invalid GRPO config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub advantage_std_epsilon: f64,
    /// Upper clamp on the per-token KL estimate; tokens above it contribute
    /// the constant and no gradient. `None` keeps the estimator unbounded.
    #[serde(default)]
    pub kl_max: Option<f64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_low: 0.20,
            clip_high: 0.28,
            kl_coef: 0.01,
            advantage_std_epsilon: 1e-6,
            kl_max: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        for (name, v) in [("clip_low", self.clip_low), ("clip_high", self.clip_high)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(GrpoError::Config(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(GrpoError::Config(format!(
                "kl_coef must be >= 0, got {}",
                self.kl_coef
            )));
        }
        if !(self.advantage_std_epsilon > 0.0 && self.advantage_std_epsilon.is_finite()) {
            return Err(GrpoError::Config(format!(
                "advantage_std_epsilon must be > 0, got {}",
                self.advantage_std_epsilon
            )));
        }
        if let Some(m) = self.kl_max {
            if !(m > 0.0 && m.is_finite()) {
                return Err(GrpoError::Config(format!("kl_max must be > 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// One sampled response with per-token natural-log probabilities under the
/// current, old (sampling) and reference policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub token_ids: Vec<usize>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub advantage: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub responses: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.reward).collect()
    }

    /// Fills every rollout's advantage from the group's rewards.
    pub fn assign_advantages(&mut self, eps: f64) -> Result<(), GrpoError> {
        let adv = compute_advantages(&self.rewards(), eps)?;
        for (r, a) in self.responses.iter_mut().zip(adv) {
            r.advantage = a;
        }
        Ok(())
    }
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::DegenerateGroup(rewards.len()));
    }
    // a rounded mean would leave tiny deviations that eps = 0 blows up to ±1
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards
        .iter()
        .map(|r| if denom > 0.0 { (r - mean) / denom } else { 0.0 })
        .collect())
}

pub fn ratio(logp_current: f64, logp_old: f64) -> f64 {
    (logp_current - logp_old).exp()
}

/// `min(r·adv, clip(r, 1-ε_low, 1+ε_high)·adv)`.
pub fn clipped_term(r: f64, adv: f64, cfg: &GrpoConfig) -> f64 {
    let clipped = r.clamp(1.0 - cfg.clip_low, 1.0 + cfg.clip_high);
    (r * adv).min(clipped * adv)
}

/// Low-variance per-token KL estimate `u - ln u - 1`, `u = π_ref / π_θ`.
pub fn kl_low_var(logp_current: f64, logp_ref: f64) -> f64 {
    let log_u = logp_ref - logp_current;
    // exp_m1 keeps the value exact near u = 1; the result is never negative
    (log_u.exp_m1() - log_u).max(0.0)
}

/// Aggregates reported alongside the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub loss: f64,
    /// The (positive) objective, `-loss`.
    pub objective: f64,
    pub mean_ratio: f64,
    /// Share of tokens where the clipped branch is strictly smaller, i.e.
    /// where the surrogate gradient is cut off.
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// Loss plus `∂loss/∂logp_current` for every token, indexed
/// `[group][rollout][token]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrads {
    pub diagnostics: LossDiagnostics,
    pub logp_grads: Vec<Vec<Vec<f64>>>,
}

struct GroupPart {
    objective: f64,
    ratio_sum: f64,
    clipped: usize,
    kl_sum: f64,
    tokens: usize,
    grads: Vec<Vec<f64>>,
}

fn check_group(group: &RolloutGroup) -> Result<(), GrpoError> {
    for (index, r) in group.responses.iter().enumerate() {
        if r.is_empty() {
            return Err(GrpoError::EmptyResponse(group.prompt_id.clone()));
        }
        let n = r.len();
        if r.logp_current.len() != n || r.logp_old.len() != n || r.logp_ref.len() != n {
            return Err(GrpoError::LengthMismatch {
                group: group.prompt_id.clone(),
                index,
            });
        }
    }
    if group.responses.is_empty() {
        return Err(GrpoError::DegenerateGroup(0));
    }
    Ok(())
}

fn group_part(group: &RolloutGroup, cfg: &GrpoConfig, scale: f64) -> GroupPart {
    let g = group.responses.len() as f64;
    let mut part = GroupPart {
        objective: 0.0,
        ratio_sum: 0.0,
        clipped: 0,
        kl_sum: 0.0,
        tokens: 0,
        grads: Vec::new(),
    };
    for r in &group.responses {
        let inv_len = 1.0 / r.len() as f64;
        let mut seq = 0.0;
        let mut grads = Vec::with_capacity(r.len());
        for t in 0..r.len() {
            let (lp, lo, lr) = (r.logp_current[t], r.logp_old[t], r.logp_ref[t]);
            let rt = ratio(lp, lo);
            let unclipped = rt * r.advantage;
            let surrogate = clipped_term(rt, r.advantage, cfg);
            let raw_kl = kl_low_var(lp, lr);
            let kl = cfg.kl_max.map_or(raw_kl, |m| raw_kl.min(m));
            seq += surrogate - cfg.kl_coef * kl;

            let cut = surrogate < unclipped;
            let d_surrogate = if cut { 0.0 } else { unclipped };
            let u = (lr - lp).exp();
            let d_kl = if kl < raw_kl { 0.0 } else { 1.0 - u };
            let d_obj = d_surrogate - cfg.kl_coef * d_kl;
            grads.push(-d_obj * inv_len / g * scale);

            part.ratio_sum += rt;
            part.kl_sum += kl;
            part.clipped += usize::from(cut);
            part.tokens += 1;
        }
        part.objective += seq * inv_len / g;
        part.grads.push(grads);
    }
    part
}

/// GRPO loss over `groups` (advantages must already be filled in) together
/// with the per-token gradient with respect to `logp_current`.
///
/// Groups are evaluated in parallel and reduced in order, so the result is
/// identical for every thread count.
pub fn grpo_loss_with_grads(
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<LossWithGrads, GrpoError> {
    for g in groups {
        check_group(g)?;
    }
    if groups.is_empty() {
        return Ok(LossWithGrads {
            diagnostics: LossDiagnostics::default(),
            logp_grads: Vec::new(),
        });
    }
    let scale = 1.0 / groups.len() as f64;
    let parts: Vec<GroupPart> = groups
        .par_iter()
        .map(|g| group_part(g, cfg, scale))
        .collect();

    let (mut objective, mut ratio_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    let (mut clipped, mut tokens) = (0usize, 0usize);
    let mut logp_grads = Vec::with_capacity(parts.len());
    for p in parts {
        objective += p.objective;
        ratio_sum += p.ratio_sum;
        kl_sum += p.kl_sum;
        clipped += p.clipped;
        tokens += p.tokens;
        logp_grads.push(p.grads);
    }
    objective *= scale;
    let denom = tokens.max(1) as f64;
    Ok(LossWithGrads {
        diagnostics: LossDiagnostics {
            loss: -objective,
            objective,
            mean_ratio: ratio_sum / denom,
            clip_fraction: clipped as f64 / denom,
            mean_kl: kl_sum / denom,
            tokens,
        },
        logp_grads,
    })
}

pub fn grpo_loss(groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<LossDiagnostics, GrpoError> {
    grpo_loss_with_grads(groups, cfg).map(|l| l.diagnostics)
}
