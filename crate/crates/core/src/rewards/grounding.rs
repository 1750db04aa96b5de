//! Hungarian-matched soft-F1 reward for box grounding.
//!
//! Every matched pair adds its IoU to a fractional true-positive count;
//! unmatched predictions and references are the false positives and false
//! negatives. Unlike a thresholded detection score this varies continuously
//! with the predicted coordinates.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_max, ProfitMatrix};
use crate::boxformat::{parse_boxes, ModelResponse};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftF1Breakdown {
    pub soft_tp: f64,
    pub n_pred: usize,
    pub n_ref: usize,
    /// Assigned pairs with strictly positive IoU.
    pub n_matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn soft_f1_reward(pred: &[BoundingBox], reference: &[BoundingBox]) -> SoftF1Breakdown {
    let (n_pred, n_ref) = (pred.len(), reference.len());
    if n_pred == 0 && n_ref == 0 {
        return SoftF1Breakdown {
            soft_tp: 0.0,
            n_pred,
            n_ref,
            n_matched: 0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }

    let ious = ProfitMatrix::from_fn(n_pred, n_ref, |i, j| pred[i].iou(&reference[j]));
    let matching = hungarian_max(&ious);
    let mut soft_tp = 0.0;
    let mut n_matched = 0;
    for &(i, j) in &matching.pairs {
        let v = ious.get(i, j);
        if v > 0.0 {
            soft_tp += v;
            n_matched += 1;
        }
    }

    let precision = if n_pred > 0 {
        soft_tp / n_pred as f64
    } else {
        0.0
    };
    let recall = if n_ref > 0 {
        soft_tp / n_ref as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    SoftF1Breakdown {
        soft_tp,
        n_pred,
        n_ref,
        n_matched,
        precision,
        recall,
        f1,
    }
}

/// Soft-F1 of the boxes parsed from a response's final answer; 0 when the
/// response has no final answer.
pub fn grounding_response_reward(resp: &ModelResponse, reference: &[BoundingBox]) -> f64 {
    match resp.final_answer.as_deref() {
        None => 0.0,
        Some(answer) => soft_f1_reward(&parse_boxes(answer).boxes, reference).f1,
    }
}
