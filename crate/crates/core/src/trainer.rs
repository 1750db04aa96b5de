//! The training loop: sample groups under a frozen snapshot of the policy,
//! score them through the reward pool, normalise rewards within each group and
//! take one plain gradient step per mini-batch of prompts.
//!
//! The reference policy is the initial policy and never moves.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxformat::parse_boxes;
use crate::evaluation::{map_at_iou, CorpusSummary, EvalError, EvalInput};
use crate::grpo::{
    compute_advantages, grpo_loss_with_grads, kl_low_var, GrpoConfig, GrpoError, Rollout,
    RolloutGroup,
};
use crate::policy::{
    accumulate_logp_grad, gen_tasks, greedy_rollout, sample_rollout, token_logps, EnvError,
    PolicyParams, SampledRollout, SyntheticTask,
};
use crate::reward_pool::{PoolError, RewardJob, RewardPool};
use crate::rewards::{
    gleu, rouge_l, soft_f1_reward, BuiltinReward, Reference, RewardError, RewardFunction,
    RewardKind, TokenSequence, Track,
};
use crate::seed::{self, stream};

/// Flat training configuration; every field has a desk-scale default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub prompts_per_step: usize,
    pub group_size: usize,
    pub ppo_mini_batch: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip applied before each update.
    pub max_grad_norm: f64,
    pub clip_low: f64,
    pub clip_high: f64,
    pub kl_coef: f64,
    pub advantage_std_epsilon: f64,
    /// Clamp on the per-token KL estimate.
    pub kl_max: Option<f64>,
    pub track: Track,
    pub reward: RewardKind,
    pub seed: u64,
    pub save_freq: usize,
    pub test_freq: usize,
    /// Wrap rollouts in a thinking block whose closing delimiter may be omitted.
    pub thinking: bool,
    /// Initial probability of omitting the closing delimiter.
    pub omission_prob: f64,
    /// Overrides the track default (0 grounding, −3 report).
    pub missing_answer_penalty: Option<f64>,
    pub max_ngram: usize,
    pub workers: usize,
    pub eval_tasks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GrpoConfig::default();
        Self {
            steps: 150,
            prompts_per_step: 64,
            group_size: g.group_size,
            ppo_mini_batch: 16,
            learning_rate: 5.0,
            max_grad_norm: 1.0,
            clip_low: g.clip_low,
            clip_high: g.clip_high,
            kl_coef: g.kl_coef,
            advantage_std_epsilon: g.advantage_std_epsilon,
            kl_max: Some(10.0),
            track: Track::Grounding,
            reward: RewardKind::SoftF1,
            seed: 7,
            save_freq: 20,
            test_freq: 20,
            thinking: false,
            omission_prob: 0.3,
            missing_answer_penalty: None,
            max_ngram: 4,
            workers: 4,
            eval_tasks: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config key `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                ConfigError::Parse(e.into_inner().to_string())
            } else {
                ConfigError::Parse(format!("key `{path}`: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_low: self.clip_low,
            clip_high: self.clip_high,
            kl_coef: self.kl_coef,
            advantage_std_epsilon: self.advantage_std_epsilon,
            kl_max: self.kl_max,
        }
    }

    pub fn reward_fn(&self) -> BuiltinReward {
        let r = BuiltinReward::new(self.reward).with_max_ngram(self.max_ngram);
        match self.missing_answer_penalty {
            Some(p) => r.with_penalty(p),
            None => r,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, reason: &str| {
            Err(ConfigError::Invalid {
                key,
                reason: reason.to_owned(),
            })
        };
        for (key, v) in [
            ("prompts_per_step", self.prompts_per_step),
            ("ppo_mini_batch", self.ppo_mini_batch),
            ("save_freq", self.save_freq),
            ("test_freq", self.test_freq),
            ("workers", self.workers),
            ("eval_tasks", self.eval_tasks),
        ] {
            if v == 0 {
                return invalid(key, "must be positive");
            }
        }
        if self.group_size < 2 {
            return invalid("group_size", "must be at least 2");
        }
        if self.prompts_per_step % self.ppo_mini_batch != 0 {
            return invalid("ppo_mini_batch", "must divide prompts_per_step");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate", "must be positive and finite");
        }
        if !(self.max_grad_norm > 0.0) {
            return invalid("max_grad_norm", "must be positive");
        }
        for (key, v) in [("clip_low", self.clip_low), ("clip_high", self.clip_high)] {
            if !(v > 0.0 && v < 1.0) {
                return invalid(key, "must lie in (0, 1)");
            }
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return invalid("kl_coef", "must be non-negative and finite");
        }
        if !(self.advantage_std_epsilon > 0.0 && self.advantage_std_epsilon.is_finite()) {
            return invalid("advantage_std_epsilon", "must be positive and finite");
        }
        if self.kl_max.is_some_and(|m| !(m > 0.0 && m.is_finite())) {
            return invalid("kl_max", "must be positive and finite");
        }
        if !(self.omission_prob > 0.0 && self.omission_prob < 1.0) {
            return invalid("omission_prob", "must lie in (0, 1)");
        }
        if self.missing_answer_penalty.is_some_and(|p| !p.is_finite()) {
            return invalid("missing_answer_penalty", "must be finite");
        }
        self.reward_fn().checked(self.track)?;
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean answer length in boxes (grounding) or words (report).
    pub mean_response_length: f64,
    /// Mean per-token KL estimate between the sampling and reference policies.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub wall_ms: u64,
    /// Fraction of rollouts without the closing thinking delimiter.
    pub omission_rate: f64,
}

impl StepLog {
    pub const CSV_HEADER: [&'static str; 7] = [
        "step",
        "mean_reward",
        "mean_response_length",
        "mean_kl",
        "clip_fraction",
        "loss",
        "wall_ms",
    ];

    /// Same log with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEval {
    pub mean_gleu: f64,
    pub mean_rouge_l: f64,
    /// Mean words per greedy answer.
    pub mean_length: f64,
    pub mean_reference_length: f64,
    /// Mean characters per greedy answer.
    pub mean_response_chars: f64,
    pub mean_reference_chars: f64,
    pub omission_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "track", rename_all = "snake_case")]
pub enum EvalReport {
    Grounding {
        summary: CorpusSummary,
        mean_soft_f1: f64,
    },
    Report(ReportEval),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite {what} at step {step} in group '{prompt_id}'; group dump: {dump}")]
    NonFinite {
        step: usize,
        what: &'static str,
        prompt_id: String,
        dump: String,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("observer: {0}")]
    Observer(String),
}

/// Hooks called while training runs.
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &PolicyParams) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_eval(&mut self, _step: usize, _report: &EvalReport) -> Result<(), TrainError> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub logs: Vec<StepLog>,
    /// Greedy evaluation of the final policy on the held-out tasks, absent
    /// when no steps ran.
    pub final_eval: Option<EvalReport>,
}

/// Rollouts for one prompt plus the quantities frozen at sampling time.
struct SampledGroup<'a> {
    task: &'a SyntheticTask,
    rollouts: Vec<SampledRollout>,
    logp_ref: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    advantages: Vec<f64>,
}

pub fn held_out_tasks(cfg: &TrainConfig) -> Result<Vec<SyntheticTask>, EnvError> {
    gen_tasks(
        cfg.eval_tasks,
        cfg.track,
        seed::derive_seed(cfg.seed, stream::EVAL_TASKS, 0),
    )
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with_observer(cfg, &mut ())
}

pub fn train_with_observer(
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let reward = cfg.reward_fn();
    let grpo_cfg = cfg.grpo();
    let pool = RewardPool::new(cfg.workers, None)?;
    let reference = PolicyParams::uniform(cfg.track, cfg.omission_prob);
    let mut params = reference.clone();
    let mut logs = Vec::with_capacity(cfg.steps);
    let eval_set = held_out_tasks(cfg)?;

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let tasks = gen_tasks(
            cfg.prompts_per_step,
            cfg.track,
            seed::derive_seed(cfg.seed, stream::TASKS, step as u64),
        )?;
        let theta_old = params.clone();
        let mut groups = sample_groups(cfg, step, &tasks, &theta_old, &reference)?;
        score_groups(cfg, step, &pool, &reward, &mut groups)?;

        let (mut loss, mut clip_fraction) = (0.0, 0.0);
        let n_batches = cfg.prompts_per_step / cfg.ppo_mini_batch;
        for batch in groups.chunks(cfg.ppo_mini_batch) {
            let (l, c) = update_on_batch(cfg, &grpo_cfg, step, &mut params, batch)?;
            loss += l / n_batches as f64;
            clip_fraction += c / n_batches as f64;
        }

        let log = step_log(step, &groups, loss, clip_fraction, started);
        observer.on_step(&log)?;
        logs.push(log);
        if step % cfg.save_freq == 0 || step == cfg.steps {
            observer.on_checkpoint(step, &params)?;
        }
        if step % cfg.test_freq == 0 && step != cfg.steps {
            observer.on_eval(
                step,
                &evaluate(
                    &params,
                    &eval_set,
                    crate::evaluation::DEFAULT_IOU_THRESHOLD,
                    cfg.thinking,
                )?,
            )?;
        }
    }

    let final_eval = if cfg.steps > 0 {
        let report = evaluate(
            &params,
            &eval_set,
            crate::evaluation::DEFAULT_IOU_THRESHOLD,
            cfg.thinking,
        )?;
        observer.on_eval(cfg.steps, &report)?;
        Some(report)
    } else {
        None
    };
    Ok(TrainOutput {
        params,
        logs,
        final_eval,
    })
}

fn sample_groups<'a>(
    cfg: &TrainConfig,
    step: usize,
    tasks: &'a [SyntheticTask],
    theta_old: &PolicyParams,
    reference: &PolicyParams,
) -> Result<Vec<SampledGroup<'a>>, EnvError> {
    let g = cfg.group_size;
    let base = ((step - 1) * tasks.len()) as u64;
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let rollouts: Vec<SampledRollout> = (0..g)
                .map(|k| {
                    let mut rng = seed::rng_for(
                        cfg.seed,
                        stream::ROLLOUTS,
                        (base + i as u64) * g as u64 + k as u64,
                    );
                    sample_rollout(theta_old, task, cfg.thinking, &mut rng)
                })
                .collect();
            let logp_ref = rollouts
                .iter()
                .map(|r| token_logps(reference, task, &r.actions))
                .collect::<Result<_, _>>()?;
            Ok(SampledGroup {
                task,
                rollouts,
                logp_ref,
                rewards: Vec::new(),
                advantages: Vec::new(),
            })
        })
        .collect()
}

fn score_groups(
    cfg: &TrainConfig,
    step: usize,
    pool: &RewardPool,
    reward: &BuiltinReward,
    groups: &mut [SampledGroup<'_>],
) -> Result<(), TrainError> {
    let g = cfg.group_size;
    let jobs: Vec<RewardJob> = groups
        .iter()
        .enumerate()
        .flat_map(|(i, grp)| {
            grp.rollouts
                .iter()
                .enumerate()
                .map(move |(k, r)| RewardJob {
                    job_id: (i * g + k) as u64,
                    track: grp.task.kind,
                    response: r.response.clone(),
                    reference: grp.task.ground_truth.clone(),
                })
        })
        .collect();
    let results = pool.score_batch(&jobs, reward)?;
    for (i, grp) in groups.iter_mut().enumerate() {
        grp.rewards = results[i * g..(i + 1) * g]
            .iter()
            .map(|r| r.reward)
            .collect();
        if grp.rewards.iter().any(|r| !r.is_finite()) {
            return Err(non_finite(step, "reward", grp));
        }
        grp.advantages = compute_advantages(&grp.rewards, cfg.advantage_std_epsilon)?;
    }
    Ok(())
}

fn non_finite(step: usize, what: &'static str, grp: &SampledGroup<'_>) -> TrainError {
    let dump = serde_json::json!({
        "task_id": grp.task.task_id,
        "context": grp.task.context,
        "responses": grp.rollouts.iter().map(|r| &r.response.raw_text).collect::<Vec<_>>(),
        "logp_old": grp.rollouts.iter().map(|r| &r.logps).collect::<Vec<_>>(),
        "rewards": grp.rewards,
        "advantages": grp.advantages,
    });
    TrainError::NonFinite {
        step,
        what,
        prompt_id: grp.task.task_id.clone(),
        dump: dump.to_string(),
    }
}

/// One gradient step on a mini-batch; returns its loss and clip fraction.
fn update_on_batch(
    cfg: &TrainConfig,
    grpo_cfg: &GrpoConfig,
    step: usize,
    params: &mut PolicyParams,
    batch: &[SampledGroup<'_>],
) -> Result<(f64, f64), TrainError> {
    let vocab = params.vocab();
    let current: &PolicyParams = params;
    let rollout_groups: Vec<RolloutGroup> = batch
        .par_iter()
        .map(|grp| {
            let responses = grp
                .rollouts
                .iter()
                .zip(&grp.logp_ref)
                .zip(grp.rewards.iter().zip(&grp.advantages))
                .map(|((r, lref), (&reward, &advantage))| {
                    Ok(Rollout {
                        token_ids: r.actions.iter().map(|a| a.token_id(vocab)).collect(),
                        logp_current: token_logps(current, grp.task, &r.actions)?,
                        logp_old: r.logps.clone(),
                        logp_ref: lref.clone(),
                        reward,
                        advantage,
                    })
                })
                .collect::<Result<_, EnvError>>()?;
            Ok(RolloutGroup {
                prompt_id: grp.task.task_id.clone(),
                responses,
            })
        })
        .collect::<Result<_, EnvError>>()?;

    let out = grpo_loss_with_grads(&rollout_groups, grpo_cfg)?;
    if !out.diagnostics.loss.is_finite() {
        let bad = rollout_groups
            .iter()
            .position(|g| {
                g.responses
                    .iter()
                    .any(|r| r.logp_current.iter().any(|l| !l.is_finite()))
            })
            .unwrap_or(0);
        return Err(non_finite(step, "loss", &batch[bad]));
    }

    let grad = batch
        .par_iter()
        .zip(&out.logp_grads)
        .map(|(grp, group_grads)| {
            let mut g = current.zero_grad();
            for (r, token_grads) in grp.rollouts.iter().zip(group_grads) {
                accumulate_logp_grad(current, grp.task, &r.actions, token_grads, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>, EnvError>>()?
        .into_iter()
        .reduce(|mut a, b| {
            a.add_assign(&b);
            a
        })
        .expect("non-empty batch");
    let norm = grad.norm();
    let scale = if norm > cfg.max_grad_norm {
        cfg.max_grad_norm / norm
    } else {
        1.0
    };
    params.descend(&grad, cfg.learning_rate * scale);
    if !params.is_finite() {
        return Err(non_finite(step, "parameters", &batch[0]));
    }
    Ok((out.diagnostics.loss, out.diagnostics.clip_fraction))
}

fn step_log(
    step: usize,
    groups: &[SampledGroup<'_>],
    loss: f64,
    clip_fraction: f64,
    started: Instant,
) -> StepLog {
    let n = groups.iter().map(|g| g.rollouts.len()).sum::<usize>() as f64;
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n;
    let mean_response_length = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .map(|r| r.answer_tokens as f64)
        .sum::<f64>()
        / n;
    let omission_rate = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .filter(|r| r.omitted_delimiter())
        .count() as f64
        / n;
    let (mut kl_sum, mut tokens) = (0.0, 0usize);
    for g in groups {
        for (r, lref) in g.rollouts.iter().zip(&g.logp_ref) {
            for (&old, &rf) in r.logps.iter().zip(lref) {
                kl_sum += kl_low_var(old, rf);
                tokens += 1;
            }
        }
    }
    StepLog {
        step,
        mean_reward,
        mean_response_length,
        mean_kl: kl_sum / tokens.max(1) as f64,
        clip_fraction,
        loss,
        wall_ms: started.elapsed().as_millis() as u64,
        omission_rate,
    }
}

/// Greedy-decodes every task and scores it: mAP at `threshold` plus mean
/// soft-F1 for grounding, mean GLEU and ROUGE-L for reports.
pub fn evaluate(
    params: &PolicyParams,
    tasks: &[SyntheticTask],
    threshold: f64,
    thinking: bool,
) -> Result<EvalReport, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let decoded: Vec<SampledRollout> = tasks
        .par_iter()
        .map(|t| greedy_rollout(params, t, thinking))
        .collect();
    let n = tasks.len() as f64;
    match params.kind() {
        Track::Grounding => {
            let mut soft_f1 = 0.0;
            let corpus: Vec<EvalInput> = tasks
                .iter()
                .zip(&decoded)
                .map(|(t, r)| {
                    let pred = r
                        .response
                        .final_answer
                        .as_deref()
                        .map(|a| parse_boxes(a).boxes)
                        .unwrap_or_default();
                    let Reference::Boxes(reference) = &t.ground_truth else {
                        unreachable!("grounding tasks carry boxes")
                    };
                    if r.response.final_answer.is_some() {
                        soft_f1 += soft_f1_reward(&pred, reference).f1;
                    }
                    EvalInput {
                        example_id: t.task_id.clone(),
                        pred_boxes: pred,
                        ref_boxes: reference.clone(),
                        response_chars: r.response.answer_chars(),
                    }
                })
                .collect();
            Ok(EvalReport::Grounding {
                summary: map_at_iou(&corpus, threshold)?,
                mean_soft_f1: soft_f1 / n,
            })
        }
        Track::Report => {
            let (mut g, mut rl, mut len, mut ref_len, mut chars, mut ref_chars, mut omitted) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
            for (t, r) in tasks.iter().zip(&decoded) {
                let Reference::Text(reference) = &t.ground_truth else {
                    unreachable!("report tasks carry text")
                };
                ref_len += reference.len() as f64;
                ref_chars += reference.to_text().chars().count() as f64;
                match r.response.final_answer.as_deref() {
                    Some(a) => {
                        let hyp = TokenSequence::from_text(a);
                        g += gleu(&hyp, reference, crate::rewards::text::DEFAULT_MAX_NGRAM);
                        rl += rouge_l(&hyp, reference);
                        len += hyp.len() as f64;
                        chars += r.response.answer_chars() as f64;
                    }
                    None => omitted += 1,
                }
            }
            Ok(EvalReport::Report(ReportEval {
                mean_gleu: g / n,
                mean_rouge_l: rl / n,
                mean_length: len / n,
                mean_reference_length: ref_len / n,
                mean_response_chars: chars / n,
                mean_reference_chars: ref_chars / n,
                omission_rate: omitted as f64 / n,
            }))
        }
    }
}

/// Non-overlapping `window`-step means of the per-step mean reward.
pub fn smoothed_rewards(logs: &[StepLog], window: usize) -> Vec<f64> {
    logs.chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().map(|l| l.mean_reward).sum::<f64>() / c.len() as f64)
        .collect()
}

/// Recomputes the reward of one scored rollout directly, bypassing the pool.
pub fn rescore(reward: &dyn RewardFunction, rollout: &SampledRollout, task: &SyntheticTask) -> f64 {
    reward.score(&rollout.response, &task.ground_truth)
}
