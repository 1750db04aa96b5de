//! Synthetic grounding/report environment and a linear-softmax autoregressive
//! policy with analytic log-probability gradients.
//!
//! The policy reads `x_t = [context; one_hot(t)]` and samples an action from
//! `softmax(W x_t)` until it emits STOP or reaches the maximum length. For the
//! grounding track the actions are boxes of a fixed grid and the emitted boxes
//! are serialized into the two-decimal wire format, so rewards go through the
//! real parse path. For the report track the actions are words.
//!
//! In thinking mode every rollout opens with a binary decision, driven by a
//! single logit, to close the thinking block. Omitting it leaves the response
//! without a final answer.
//!
//! # Checkpoint layout
//!
//! Little-endian, no padding:
//!
//! | offset | type | field |
//! |-------:|------|-------|
//! | 0  | `[u8; 4]` | magic `RRLP` |
//! | 4  | `u32` | format version (1) |
//! | 8  | `u32` | track: 0 grounding, 1 report |
//! | 12 | `u32` | vocabulary size `V` (STOP included) |
//! | 16 | `u32` | context dimension `d` |
//! | 20 | `u32` | maximum length `L` |
//! | 24 | `f64` | delimiter logit |
//! | 32 | `f64 × V(d+L)` | weights, row-major by action |

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::boxformat::{
    extract_final_answer, serialize_boxes, ModelResponse, THINK_CLOSE, THINK_OPEN,
};
use crate::geometry::BoundingBox;
use crate::rewards::{Reference, Track};
use crate::seed;

pub const CONTEXT_DIM: usize = 16;
pub const GROUNDING_MAX_LEN: usize = 6;
pub const REPORT_MAX_LEN: usize = 12;
const GROUNDING_SLOTS: usize = 4;
const REPORT_SLOTS: usize = 7;
const REPORT_MIN_LEN: usize = 4;
/// Context coordinate that sets how many boxes or words the answer has.
const COUNT_FEATURE: usize = 15;

const THINK_FILLER: &str = "Reviewing the image region by region before answering.";

/// Report vocabulary: seven slots of four words each.
pub const REPORT_WORDS: [&str; 28] = [
    "lungs",
    "heart",
    "mediastinum",
    "trachea",
    "clear",
    "enlarged",
    "stable",
    "shifted",
    "no",
    "mild",
    "moderate",
    "severe",
    "effusion",
    "edema",
    "consolidation",
    "pneumothorax",
    "left",
    "right",
    "bilateral",
    "basilar",
    "opacity",
    "atelectasis",
    "nodule",
    "cardiomegaly",
    "unchanged",
    "improved",
    "worsened",
    "new",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("n ≥ 1 required, got {0}")]
    EmptyRequest(usize),
    #[error("action {index} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { index: usize, vocab: usize },
    #[error("malformed action sequence: {0}")]
    Malformed(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Checkpoint(e.to_string())
    }
}

/// Bijection between action indices `0..32` and grid boxes: 16 cells of a 4×4
/// grid (side 0.25) followed by 16 overlapping boxes of side 0.5 whose
/// corners sit at offsets 0, 0.15, 0.35, 0.5.
pub struct VocabBox;

impl VocabBox {
    pub const COUNT: usize = 32;
    const LARGE_OFFSETS: [f64; 4] = [0.0, 0.15, 0.35, 0.5];

    pub fn decode(index: usize) -> Option<BoundingBox> {
        if index < 16 {
            let (row, col) = ((index / 4) as f64, (index % 4) as f64);
            BoundingBox::new(
                col * 0.25,
                row * 0.25,
                (col + 1.0) * 0.25,
                (row + 1.0) * 0.25,
            )
            .ok()
        } else if index < Self::COUNT {
            let k = index - 16;
            let (y, x) = (Self::LARGE_OFFSETS[k / 4], Self::LARGE_OFFSETS[k % 4]);
            BoundingBox::new(x, y, x + 0.5, y + 0.5).ok()
        } else {
            None
        }
    }

    /// Index of the grid box within 0.005 of `b` on every coordinate.
    pub fn encode(b: &BoundingBox) -> Option<usize> {
        (0..Self::COUNT).find(|&i| {
            let g = Self::decode(i).expect("index in range");
            g.coords()
                .iter()
                .zip(b.coords())
                .all(|(x, y)| (x - y).abs() <= 0.005)
        })
    }

    /// Large box `col` of grid row `row`.
    fn large(row: usize, col: usize) -> usize {
        16 + row * 4 + col
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: String,
    pub kind: Track,
    pub context: Vec<f64>,
    pub ground_truth: Reference,
    pub rng_seed: u64,
}

impl SyntheticTask {
    /// Canonical correct answer text.
    pub fn oracle_answer(&self) -> String {
        match &self.ground_truth {
            Reference::Boxes(b) => serialize_boxes(b),
            Reference::Text(t) => t.to_text(),
        }
    }
}

fn sign_bits(context: &[f64], first: usize, count: usize) -> usize {
    (0..count).fold(0, |acc, k| {
        (acc << 1) | usize::from(context[first + k] > 0.0)
    })
}

fn answer_count(context: &[f64], min: usize, levels: usize) -> usize {
    let level = ((context[COUNT_FEATURE] + 1.0) * levels as f64 / 2.0).floor() as usize;
    min + level.min(levels - 1)
}

/// Ground truth as a fixed function of the context. The count coordinate
/// fixes how many slots are filled. Grounding slot `t` answers with one of two
/// overlapping half-size boxes in grid row `t`; report slot `t` answers with
/// one of the first two words of its group. Either way the sign of coordinate
/// `2t` picks the member.
pub fn ground_truth(kind: Track, context: &[f64]) -> Reference {
    match kind {
        Track::Grounding => {
            let n = answer_count(context, 1, GROUNDING_SLOTS);
            let boxes = (0..n)
                .map(|t| {
                    VocabBox::decode(VocabBox::large(t, sign_bits(context, 2 * t, 1)))
                        .expect("grid index")
                })
                .collect();
            Reference::Boxes(boxes)
        }
        Track::Report => {
            let n = answer_count(context, REPORT_MIN_LEN, REPORT_SLOTS - REPORT_MIN_LEN + 1);
            let words = (0..n).map(|t| REPORT_WORDS[t * 4 + sign_bits(context, 2 * t, 1)]);
            Reference::Text(words.collect())
        }
    }
}

pub fn gen_tasks(n: usize, kind: Track, seed: u64) -> Result<Vec<SyntheticTask>, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptyRequest(n));
    }
    Ok((0..n)
        .map(|i| {
            let rng_seed = seed::derive_seed(seed, seed::stream::TASK_CONTEXT, i as u64);
            let mut rng = seed::rng_for(rng_seed, 0, 0);
            let context: Vec<f64> = (0..CONTEXT_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            SyntheticTask {
                task_id: format!("{kind}-{seed}-{i}"),
                kind,
                ground_truth: ground_truth(kind, &context),
                context,
                rng_seed,
            }
        })
        .collect())
}

/// Parameters of the linear-softmax policy plus the thinking-delimiter logit.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    kind: Track,
    vocab: usize,
    context_dim: usize,
    max_len: usize,
    weights: Vec<f64>,
    delimiter_logit: f64,
}

/// Gradient buffer with the same shape as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub weights: Vec<f64>,
    pub delimiter_logit: f64,
}

impl PolicyGrad {
    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        (self.weights.iter().map(|g| g * g).sum::<f64>() + self.delimiter_logit.powi(2)).sqrt()
    }

    pub fn add_assign(&mut self, other: &PolicyGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        self.delimiter_logit += other.delimiter_logit;
    }
}

impl PolicyParams {
    /// All-zero weights: the uniform policy. The delimiter logit starts at
    /// `ln((1 - p) / p)` for the given delimiter-omission probability `p`.
    pub fn uniform(kind: Track, omission_prob: f64) -> Self {
        let (vocab, max_len) = match kind {
            Track::Grounding => (VocabBox::COUNT + 1, GROUNDING_MAX_LEN),
            Track::Report => (REPORT_WORDS.len() + 1, REPORT_MAX_LEN),
        };
        let p = omission_prob.clamp(1e-12, 1.0 - 1e-12);
        Self {
            kind,
            vocab,
            context_dim: CONTEXT_DIM,
            max_len,
            weights: vec![0.0; vocab * (CONTEXT_DIM + max_len)],
            delimiter_logit: ((1.0 - p) / p).ln(),
        }
    }

    pub fn kind(&self) -> Track {
        self.kind
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn stop_index(&self) -> usize {
        self.vocab - 1
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn cols(&self) -> usize {
        self.context_dim + self.max_len
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn delimiter_logit(&self) -> f64 {
        self.delimiter_logit
    }

    pub fn set_delimiter_logit(&mut self, v: f64) {
        self.delimiter_logit = v;
    }

    /// Probability that a thinking rollout omits the closing delimiter.
    pub fn omission_prob(&self) -> f64 {
        sigmoid(-self.delimiter_logit)
    }

    pub fn zero_grad(&self) -> PolicyGrad {
        PolicyGrad {
            weights: vec![0.0; self.weights.len()],
            delimiter_logit: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.delimiter_logit.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &PolicyGrad, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        self.delimiter_logit -= lr * grad.delimiter_logit;
    }

    pub fn weight(&self, action: usize, col: usize) -> f64 {
        self.weights[action * self.cols() + col]
    }

    pub fn set_weight(&mut self, action: usize, col: usize, v: f64) {
        let cols = self.cols();
        self.weights[action * cols + col] = v;
    }

    /// Log-softmax over actions at position `pos`.
    pub fn log_probs(&self, context: &[f64], pos: usize) -> Vec<f64> {
        let cols = self.cols();
        let mut logits: Vec<f64> = (0..self.vocab)
            .map(|a| {
                let row = &self.weights[a * cols..(a + 1) * cols];
                let ctx: f64 = row[..self.context_dim]
                    .iter()
                    .zip(context)
                    .map(|(w, c)| w * c)
                    .sum();
                ctx + row[self.context_dim + pos]
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for l in &mut logits {
            *l -= lse;
        }
        logits
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), EnvError> {
        w.write_all(b"RRLP")?;
        w.write_all(&1u32.to_le_bytes())?;
        let kind: u32 = match self.kind {
            Track::Grounding => 0,
            Track::Report => 1,
        };
        for v in [
            kind,
            self.vocab as u32,
            self.context_dim as u32,
            self.max_len as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.delimiter_logit.to_le_bytes())?;
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, EnvError> {
        let mut header = [0u8; 32];
        r.read_exact(&mut header)?;
        if &header[0..4] != b"RRLP" {
            return Err(EnvError::Checkpoint("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(4) != 1 {
            return Err(EnvError::Checkpoint(format!(
                "unsupported format version {}",
                u32_at(4)
            )));
        }
        let kind = match u32_at(8) {
            0 => Track::Grounding,
            1 => Track::Report,
            k => return Err(EnvError::Checkpoint(format!("unknown track {k}"))),
        };
        let mut expected = Self::uniform(kind, 0.5);
        let (vocab, context_dim, max_len) = (
            u32_at(12) as usize,
            u32_at(16) as usize,
            u32_at(20) as usize,
        );
        if (vocab, context_dim, max_len) != (expected.vocab, expected.context_dim, expected.max_len)
        {
            return Err(EnvError::Checkpoint(format!(
                "shape {vocab}x{context_dim}+{max_len} does not match the {kind} policy"
            )));
        }
        expected.delimiter_logit = f64::from_le_bytes(header[24..32].try_into().expect("8 bytes"));
        let mut buf = [0u8; 8];
        for w in expected.weights.iter_mut() {
            r.read_exact(&mut buf)?;
            *w = f64::from_le_bytes(buf);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(EnvError::Checkpoint("trailing bytes".into()));
        }
        if !expected.is_finite() {
            return Err(EnvError::Checkpoint("non-finite parameters".into()));
        }
        Ok(expected)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    CloseThinking,
    OmitThinking,
    Emit(usize),
}

impl Action {
    /// Flat id: vocabulary indices as-is, then `V` for closing and `V + 1`
    /// for omitting the thinking delimiter.
    pub fn token_id(self, vocab: usize) -> usize {
        match self {
            Action::Emit(i) => i,
            Action::CloseThinking => vocab,
            Action::OmitThinking => vocab + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRollout {
    pub actions: Vec<Action>,
    /// Per-token log-probabilities under the sampling parameters.
    pub logps: Vec<f64>,
    pub response: ModelResponse,
    /// Boxes or words in the answer (STOP and the delimiter decision excluded).
    pub answer_tokens: usize,
}

impl SampledRollout {
    pub fn omitted_delimiter(&self) -> bool {
        self.actions.first() == Some(&Action::OmitThinking)
    }
}

fn render_answer(params: &PolicyParams, emitted: &[usize]) -> String {
    match params.kind {
        Track::Grounding => {
            let boxes: Vec<BoundingBox> = emitted
                .iter()
                .map(|&i| VocabBox::decode(i).expect("grid index"))
                .collect();
            serialize_boxes(&boxes)
        }
        Track::Report => emitted
            .iter()
            .map(|&i| REPORT_WORDS[i])
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn rollout_from_actions(
    params: &PolicyParams,
    actions: Vec<Action>,
    logps: Vec<f64>,
    thinking: bool,
) -> SampledRollout {
    let emitted: Vec<usize> = actions
        .iter()
        .filter_map(|a| match *a {
            Action::Emit(i) if i != params.stop_index() => Some(i),
            _ => None,
        })
        .collect();
    let answer = render_answer(params, &emitted);
    let text = if !thinking {
        answer
    } else if actions.first() == Some(&Action::OmitThinking) {
        format!("{THINK_OPEN}{THINK_FILLER}")
    } else {
        format!("{THINK_OPEN}{THINK_FILLER}{THINK_CLOSE}{answer}")
    };
    let response = extract_final_answer(&text, thinking).with_token_count(actions.len());
    SampledRollout {
        answer_tokens: emitted.len(),
        actions,
        logps,
        response,
    }
}

fn decode_with(
    params: &PolicyParams,
    task: &SyntheticTask,
    thinking: bool,
    mut choose: impl FnMut(&[f64]) -> usize,
    mut choose_close: impl FnMut(f64) -> bool,
) -> SampledRollout {
    let mut actions = Vec::with_capacity(params.max_len + 1);
    let mut logps = Vec::with_capacity(params.max_len + 1);
    if thinking {
        let close = choose_close(sigmoid(params.delimiter_logit));
        if close {
            actions.push(Action::CloseThinking);
            logps.push(log_sigmoid(params.delimiter_logit));
        } else {
            actions.push(Action::OmitThinking);
            logps.push(log_sigmoid(-params.delimiter_logit));
            return rollout_from_actions(params, actions, logps, thinking);
        }
    }
    for pos in 0..params.max_len {
        let lp = params.log_probs(&task.context, pos);
        let a = choose(&lp);
        actions.push(Action::Emit(a));
        logps.push(lp[a]);
        if a == params.stop_index() {
            break;
        }
    }
    rollout_from_actions(params, actions, logps, thinking)
}

/// Samples one rollout autoregressively.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &SyntheticTask,
    thinking: bool,
    rng: &mut R,
) -> SampledRollout {
    let u_close: f64 = if thinking { rng.gen() } else { 0.0 };
    let mut draw = |lp: &[f64]| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return a;
            }
        }
        lp.len() - 1
    };
    decode_with(params, task, thinking, &mut draw, |p_close| {
        u_close < p_close
    })
}

/// Argmax decoding; ties go to the lowest action index.
pub fn greedy_rollout(
    params: &PolicyParams,
    task: &SyntheticTask,
    thinking: bool,
) -> SampledRollout {
    let argmax = |lp: &[f64]| {
        let mut best = 0;
        for (a, &l) in lp.iter().enumerate() {
            if l > lp[best] {
                best = a;
            }
        }
        best
    };
    decode_with(params, task, thinking, argmax, |p_close| p_close >= 0.5)
}

fn check_actions(params: &PolicyParams, actions: &[Action]) -> Result<(), EnvError> {
    let mut pos = 0usize;
    for (k, a) in actions.iter().enumerate() {
        match *a {
            Action::CloseThinking | Action::OmitThinking if k != 0 => {
                return Err(EnvError::Malformed(format!(
                    "delimiter decision at step {k}"
                )));
            }
            Action::OmitThinking if actions.len() > 1 => {
                return Err(EnvError::Malformed(
                    "actions after an omitted delimiter".into(),
                ));
            }
            Action::CloseThinking | Action::OmitThinking => {}
            Action::Emit(i) => {
                if i >= params.vocab {
                    return Err(EnvError::OutOfVocabulary {
                        index: i,
                        vocab: params.vocab,
                    });
                }
                if pos >= params.max_len {
                    return Err(EnvError::Malformed(format!(
                        "more than {} emitted actions",
                        params.max_len
                    )));
                }
                if i == params.stop_index() && k + 1 != actions.len() {
                    return Err(EnvError::Malformed("actions after STOP".into()));
                }
                pos += 1;
            }
        }
    }
    Ok(())
}

/// Per-token log-probabilities of `actions` under `params`.
pub fn token_logps(
    params: &PolicyParams,
    task: &SyntheticTask,
    actions: &[Action],
) -> Result<Vec<f64>, EnvError> {
    check_actions(params, actions)?;
    let mut pos = 0;
    Ok(actions
        .iter()
        .map(|a| match *a {
            Action::CloseThinking => log_sigmoid(params.delimiter_logit),
            Action::OmitThinking => log_sigmoid(-params.delimiter_logit),
            Action::Emit(i) => {
                let lp = params.log_probs(&task.context, pos)[i];
                pos += 1;
                lp
            }
        })
        .collect())
}

/// Adds `Σ_t token_weights[t] · ∂logp_t/∂θ` into `grad`.
pub fn accumulate_logp_grad(
    params: &PolicyParams,
    task: &SyntheticTask,
    actions: &[Action],
    token_weights: &[f64],
    grad: &mut PolicyGrad,
) -> Result<(), EnvError> {
    check_actions(params, actions)?;
    if token_weights.len() != actions.len() {
        return Err(EnvError::Malformed("one weight per action required".into()));
    }
    let cols = params.cols();
    let d = params.context_dim;
    let mut pos = 0;
    for (a, &wt) in actions.iter().zip(token_weights) {
        match *a {
            Action::CloseThinking => grad.delimiter_logit += wt * sigmoid(-params.delimiter_logit),
            Action::OmitThinking => grad.delimiter_logit -= wt * sigmoid(params.delimiter_logit),
            Action::Emit(chosen) => {
                if wt != 0.0 {
                    let lp = params.log_probs(&task.context, pos);
                    for (b, l) in lp.iter().enumerate() {
                        let coeff = wt * (f64::from(u8::from(b == chosen)) - l.exp());
                        let row = &mut grad.weights[b * cols..(b + 1) * cols];
                        for (g, c) in row[..d].iter_mut().zip(&task.context) {
                            *g += coeff * c;
                        }
                        row[d + pos] += coeff;
                    }
                }
                pos += 1;
            }
        }
    }
    Ok(())
}

/// Total log-probability of `actions` and its gradient.
pub fn logp_and_grad(
    params: &PolicyParams,
    task: &SyntheticTask,
    actions: &[Action],
) -> Result<(f64, PolicyGrad), EnvError> {
    let logp = token_logps(params, task, actions)?.iter().sum();
    let mut grad = params.zero_grad();
    accumulate_logp_grad(params, task, actions, &vec![1.0; actions.len()], &mut grad)?;
    Ok((logp, grad))
}
