//! Thresholded grounding evaluation.
//!
//! Predictions are matched greedily in emission order: each takes the
//! highest-IoU reference that is still unmatched, provided the IoU strictly
//! exceeds the threshold. Generated boxes carry no confidence score, so the
//! per-example average precision reduces to precision at that threshold and
//! the corpus score is its mean over examples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no examples")]
    NoExamples,
    #[error("IoU threshold must lie strictly between 0 and 1, got {0}")]
    Threshold(f64),
}

/// Predictions and references for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub example_id: String,
    pub pred_boxes: Vec<BoundingBox>,
    pub ref_boxes: Vec<BoundingBox>,
    /// Characters in the scored answer, for length diagnostics.
    #[serde(default)]
    pub response_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: String,
    pub pred_boxes: Vec<BoundingBox>,
    pub ref_boxes: Vec<BoundingBox>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision_at_iou: f64,
}

impl EvalRecord {
    pub fn is_perfect(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub map_at_50: f64,
    pub records: Vec<EvalRecord>,
    pub mean_response_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn greedy_counts(
    pred: &[BoundingBox],
    reference: &[BoundingBox],
    iou_threshold: f64,
) -> GreedyCounts {
    let mut taken = vec![false; reference.len()];
    let mut tp = 0;
    for p in pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, r) in reference.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = p.iou(r);
            if v > iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp += 1;
        }
    }
    GreedyCounts {
        tp,
        fp: pred.len() - tp,
        fn_: reference.len() - tp,
    }
}

/// Per-example precision: 1 for an empty/empty example, otherwise
/// `tp / (tp + fp)` with 0 when there are no predictions.
pub fn example_precision(c: GreedyCounts) -> f64 {
    let n_pred = c.tp + c.fp;
    if n_pred == 0 {
        return if c.fn_ == 0 { 1.0 } else { 0.0 };
    }
    c.tp as f64 / n_pred as f64
}

pub fn match_greedy(input: &EvalInput, iou_threshold: f64) -> Result<EvalRecord, EvalError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(EvalError::Threshold(iou_threshold));
    }
    let c = greedy_counts(&input.pred_boxes, &input.ref_boxes, iou_threshold);
    Ok(EvalRecord {
        example_id: input.example_id.clone(),
        pred_boxes: input.pred_boxes.clone(),
        ref_boxes: input.ref_boxes.clone(),
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        precision_at_iou: example_precision(c),
    })
}

/// Mean per-example precision at `iou_threshold` over the corpus.
///
/// Records are computed in parallel; the mean is reduced sequentially in
/// corpus order so the result does not depend on the thread count.
pub fn map_at_iou(corpus: &[EvalInput], iou_threshold: f64) -> Result<CorpusSummary, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::NoExamples);
    }
    let records = corpus
        .par_iter()
        .map(|input| match_greedy(input, iou_threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let n = records.len() as f64;
    let map_at_50 = records.iter().map(|r| r.precision_at_iou).sum::<f64>() / n;
    let mean_response_length = corpus.iter().map(|c| c.response_chars as f64).sum::<f64>() / n;
    Ok(CorpusSummary {
        map_at_50,
        records,
        mean_response_length,
    })
}

pub fn map_at_50(corpus: &[EvalInput]) -> Result<CorpusSummary, EvalError> {
    map_at_iou(corpus, DEFAULT_IOU_THRESHOLD)
}
