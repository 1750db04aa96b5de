//! JSONL corpus records shared by `gen`, `score` and `eval`.

use radrl::boxformat::{extract_final_answer, ModelResponse};
use radrl::geometry::BoundingBox;
use radrl::policy::SyntheticTask;
use radrl::rewards::{Reference, TokenSequence, Track};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    /// Raw model text.
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_boxes: Option<Vec<[f64; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_text: Option<String>,
    #[serde(default)]
    pub is_thinking: bool,
}

impl CorpusRecord {
    /// Fixture record whose prediction is the task's correct answer.
    pub fn from_task(task: &SyntheticTask) -> Self {
        let (reference_boxes, reference_text) = match &task.ground_truth {
            Reference::Boxes(b) => (Some(b.iter().map(BoundingBox::coords).collect()), None),
            Reference::Text(t) => (None, Some(t.to_text())),
        };
        Self {
            id: task.task_id.clone(),
            prediction: task.oracle_answer(),
            reference_boxes,
            reference_text,
            is_thinking: false,
        }
    }

    /// The reference, checked against `track`.
    pub fn reference(&self, track: Track) -> Result<Reference, String> {
        match (track, &self.reference_boxes, &self.reference_text) {
            (Track::Grounding, Some(boxes), None) => boxes
                .iter()
                .map(|&[a, b, c, d]| BoundingBox::new(a, b, c, d).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()
                .map(Reference::Boxes),
            (Track::Report, None, Some(text)) => {
                Ok(Reference::Text(TokenSequence::from_text(text)))
            }
            (_, Some(_), Some(_)) => Err("both reference_boxes and reference_text present".into()),
            (_, None, None) => Err("no reference present".into()),
            (Track::Grounding, None, Some(_)) => {
                Err("grounding record needs reference_boxes".into())
            }
            (Track::Report, Some(_), None) => Err("report record needs reference_text".into()),
        }
    }

    pub fn response(&self) -> ModelResponse {
        extract_final_answer(&self.prediction, self.is_thinking)
    }
}

/// Parses one JSONL line; the error names what is wrong with it.
pub fn parse_line(line: &str, track: Track) -> Result<(CorpusRecord, Reference), String> {
    let record: CorpusRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let reference = record.reference(track)?;
    Ok((record, reference))
}

/// Best-effort `id` of a line that failed to parse.
pub fn salvage_id(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("id")?.as_str().map(str::to_owned)
}
