//! Shared fixtures: a frozen batch of sampled groups and the GRPO loss as a
//! function of the current policy parameters.

#![allow(dead_code)]

use radrl::grpo::{compute_advantages, grpo_loss_with_grads, GrpoConfig, Rollout, RolloutGroup};
use radrl::policy::{
    accumulate_logp_grad, gen_tasks, sample_rollout, token_logps, PolicyGrad, PolicyParams,
    SampledRollout, SyntheticTask,
};
use radrl::rewards::{BuiltinReward, RewardFunction, RewardKind, Track};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Batch {
    pub tasks: Vec<SyntheticTask>,
    pub rollouts: Vec<Vec<SampledRollout>>,
    pub logp_ref: Vec<Vec<Vec<f64>>>,
    pub advantages: Vec<Vec<f64>>,
}

/// Policy with every weight drawn from N-ish(0, scale) noise.
pub fn random_params(track: Track, scale: f64, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::uniform(track, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in p.weights_mut() {
        *w = scale * (rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5);
    }
    let d = p.delimiter_logit();
    p.set_delimiter_logit(d + scale * (rng.gen::<f64>() - 0.5));
    p
}

/// Samples `groups` prompts with `g` rollouts each from `old` and scores them.
pub fn sample_batch(
    old: &PolicyParams,
    reward: RewardKind,
    groups: usize,
    g: usize,
    thinking: bool,
    seed: u64,
) -> Batch {
    let track = old.kind();
    let tasks = gen_tasks(groups, track, seed).unwrap();
    let reference = PolicyParams::uniform(track, old.omission_prob());
    let scorer = BuiltinReward::new(reward);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rollouts = Vec::new();
    let mut logp_ref = Vec::new();
    let mut advantages = Vec::new();
    for task in &tasks {
        let rs: Vec<SampledRollout> = (0..g)
            .map(|_| sample_rollout(old, task, thinking, &mut rng))
            .collect();
        let rewards: Vec<f64> = rs
            .iter()
            .map(|r| scorer.score(&r.response, &task.ground_truth))
            .collect();
        advantages.push(compute_advantages(&rewards, 1e-6).unwrap());
        logp_ref.push(
            rs.iter()
                .map(|r| token_logps(&reference, task, &r.actions).unwrap())
                .collect(),
        );
        rollouts.push(rs);
    }
    Batch {
        tasks,
        rollouts,
        logp_ref,
        advantages,
    }
}

fn groups_at(params: &PolicyParams, batch: &Batch) -> Vec<RolloutGroup> {
    let vocab = params.vocab();
    batch
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| RolloutGroup {
            prompt_id: task.task_id.clone(),
            responses: batch.rollouts[i]
                .iter()
                .enumerate()
                .map(|(k, r)| Rollout {
                    token_ids: r.actions.iter().map(|a| a.token_id(vocab)).collect(),
                    logp_current: token_logps(params, task, &r.actions).unwrap(),
                    logp_old: r.logps.clone(),
                    logp_ref: batch.logp_ref[i][k].clone(),
                    reward: 0.0,
                    advantage: batch.advantages[i][k],
                })
                .collect(),
        })
        .collect()
}

pub fn loss_at(params: &PolicyParams, batch: &Batch, cfg: &GrpoConfig) -> f64 {
    grpo_loss_with_grads(&groups_at(params, batch), cfg)
        .unwrap()
        .diagnostics
        .loss
}

/// Analytic `∂loss/∂θ`, chained through the per-token log-probabilities.
pub fn grad_at(params: &PolicyParams, batch: &Batch, cfg: &GrpoConfig) -> PolicyGrad {
    let out = grpo_loss_with_grads(&groups_at(params, batch), cfg).unwrap();
    let mut grad = params.zero_grad();
    for (i, task) in batch.tasks.iter().enumerate() {
        for (r, w) in batch.rollouts[i].iter().zip(&out.logp_grads[i]) {
            accumulate_logp_grad(params, task, &r.actions, w, &mut grad).unwrap();
        }
    }
    grad
}

/// `−(1/N)Σ_groups (1/G)Σ_i (1/|o_i|) Â_i ∂logp(o_i)/∂θ`.
pub fn vanilla_pg(params: &PolicyParams, batch: &Batch) -> PolicyGrad {
    let mut grad = params.zero_grad();
    let n = batch.tasks.len() as f64;
    for (i, task) in batch.tasks.iter().enumerate() {
        let g = batch.rollouts[i].len() as f64;
        for (r, &adv) in batch.rollouts[i].iter().zip(&batch.advantages[i]) {
            let w = -adv / (g * r.actions.len() as f64 * n);
            accumulate_logp_grad(
                params,
                task,
                &r.actions,
                &vec![w; r.actions.len()],
                &mut grad,
            )
            .unwrap();
        }
    }
    grad
}

/// Central difference of the loss along weight `idx` (the delimiter logit
/// when `idx` equals the weight count).
pub fn finite_difference(
    params: &PolicyParams,
    batch: &Batch,
    cfg: &GrpoConfig,
    idx: usize,
    h: f64,
) -> f64 {
    let shift = |delta: f64| {
        let mut p = params.clone();
        if idx == p.weights().len() {
            let d = p.delimiter_logit();
            p.set_delimiter_logit(d + delta);
        } else {
            p.weights_mut()[idx] += delta;
        }
        loss_at(&p, batch, cfg)
    };
    (shift(h) - shift(-h)) / (2.0 * h)
}

pub fn grad_entry(grad: &PolicyGrad, idx: usize) -> f64 {
    if idx == grad.weights.len() {
        grad.delimiter_logit
    } else {
        grad.weights[idx]
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
