//! Verifiable rewards and the pluggable interface the reward pool calls.

pub mod grounding;
pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxformat::ModelResponse;
use crate::geometry::BoundingBox;

pub use grounding::{grounding_response_reward, soft_f1_reward, SoftF1Breakdown};
pub use text::{
    gleu, rouge_l, text_response_reward, unigram_precision_unclipped, TextMetric, TextRewardSpec,
    TokenSequence, REPORT_MISSING_ANSWER_PENALTY,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Grounding,
    Report,
}

impl std::fmt::Display for Track {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Track::Grounding => "grounding",
            Track::Report => "report",
        })
    }
}

/// Ground truth a response is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reference {
    Boxes(Vec<BoundingBox>),
    Text(TokenSequence),
}

impl Reference {
    pub fn track(&self) -> Track {
        match self {
            Reference::Boxes(_) => Track::Grounding,
            Reference::Text(_) => Track::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    SoftF1,
    Gleu,
    RougeL,
    UnigramPrecision,
}

impl RewardKind {
    pub fn track(self) -> Track {
        match self {
            RewardKind::SoftF1 => Track::Grounding,
            RewardKind::Gleu | RewardKind::RougeL | RewardKind::UnigramPrecision => Track::Report,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RewardKind::SoftF1 => "soft_f1",
            RewardKind::Gleu => "gleu",
            RewardKind::RougeL => "rouge_l",
            RewardKind::UnigramPrecision => "unigram_precision",
        }
    }
}

impl std::str::FromStr for RewardKind {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft_f1" => Ok(RewardKind::SoftF1),
            "gleu" => Ok(RewardKind::Gleu),
            "rouge_l" => Ok(RewardKind::RougeL),
            "unigram_precision" => Ok(RewardKind::UnigramPrecision),
            other => Err(RewardError::UnknownKind(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("unknown reward '{0}'")]
    UnknownKind(String),
    #[error("reward/track mismatch: {reward} scores the {expected} track, not {got}")]
    TrackMismatch {
        reward: &'static str,
        expected: Track,
        got: Track,
    },
    #[error(transparent)]
    Spec(#[from] text::TextRewardError),
}

/// A reward callable from many threads at once.
pub trait RewardFunction: Send + Sync {
    fn track(&self) -> Track;

    /// Reward for `response` against `reference`. References of the wrong
    /// track score the missing-answer value.
    fn score(&self, response: &ModelResponse, reference: &Reference) -> f64;
}

/// One of the built-in lexical or geometric rewards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinReward {
    kind: RewardKind,
    max_ngram: usize,
    missing_answer_penalty: f64,
}

impl BuiltinReward {
    /// Uses the track default penalty: 0 for grounding, −3 for reports.
    pub fn new(kind: RewardKind) -> Self {
        let missing_answer_penalty = match kind.track() {
            Track::Grounding => 0.0,
            Track::Report => REPORT_MISSING_ANSWER_PENALTY,
        };
        Self {
            kind,
            max_ngram: text::DEFAULT_MAX_NGRAM,
            missing_answer_penalty,
        }
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.missing_answer_penalty = penalty;
        self
    }

    pub fn with_max_ngram(mut self, max_ngram: usize) -> Self {
        self.max_ngram = max_ngram;
        self
    }

    /// Validates the settings and that `track` is the one this reward scores.
    pub fn checked(self, track: Track) -> Result<Self, RewardError> {
        if self.kind.track() != track {
            return Err(RewardError::TrackMismatch {
                reward: self.kind.name(),
                expected: self.kind.track(),
                got: track,
            });
        }
        if self.kind.track() == Track::Report {
            self.text_spec()?;
        }
        Ok(self)
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn missing_answer_penalty(&self) -> f64 {
        self.missing_answer_penalty
    }

    fn text_spec(&self) -> Result<TextRewardSpec, text::TextRewardError> {
        let metric = match self.kind {
            RewardKind::Gleu | RewardKind::SoftF1 => TextMetric::Gleu,
            RewardKind::RougeL => TextMetric::RougeL,
            RewardKind::UnigramPrecision => TextMetric::UnigramPrecision,
        };
        TextRewardSpec::new(metric, self.max_ngram, self.missing_answer_penalty)
    }
}

impl RewardFunction for BuiltinReward {
    fn track(&self) -> Track {
        self.kind.track()
    }

    fn score(&self, response: &ModelResponse, reference: &Reference) -> f64 {
        match (self.kind, reference) {
            (RewardKind::SoftF1, Reference::Boxes(boxes)) => match response.final_answer {
                None => self.missing_answer_penalty,
                Some(_) => grounding_response_reward(response, boxes),
            },
            (
                RewardKind::Gleu | RewardKind::RougeL | RewardKind::UnigramPrecision,
                Reference::Text(t),
            ) => match self.text_spec() {
                Ok(spec) => text_response_reward(response, t, &spec),
                Err(_) => self.missing_answer_penalty,
            },
            _ => self.missing_answer_penalty,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxformat::extract_final_answer;

    #[test]
    fn track_mismatch_is_reported() {
        let err = BuiltinReward::new(RewardKind::Gleu)
            .checked(Track::Grounding)
            .unwrap_err();
        assert!(err.to_string().starts_with("reward/track mismatch"));
        assert!(BuiltinReward::new(RewardKind::SoftF1)
            .checked(Track::Grounding)
            .is_ok());
        assert!(BuiltinReward::new(RewardKind::Gleu)
            .with_max_ngram(0)
            .checked(Track::Report)
            .is_err());
    }

    #[test]
    fn penalty_defaults_follow_track() {
        let missing = extract_final_answer("no delimiter here", true);
        let boxes = Reference::Boxes(vec![BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap()]);
        let text = Reference::Text(TokenSequence::from_text("lungs clear"));
        assert_eq!(
            BuiltinReward::new(RewardKind::SoftF1).score(&missing, &boxes),
            0.0
        );
        assert_eq!(
            BuiltinReward::new(RewardKind::Gleu).score(&missing, &text),
            -3.0
        );
        assert_eq!(
            BuiltinReward::new(RewardKind::RougeL).score(&missing, &text),
            -3.0
        );
    }

    #[test]
    fn reward_kind_round_trips_through_names() {
        for k in [
            RewardKind::SoftF1,
            RewardKind::Gleu,
            RewardKind::RougeL,
            RewardKind::UnigramPrecision,
        ] {
            assert_eq!(k.name().parse::<RewardKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
        assert!("bleu".parse::<RewardKind>().is_err());
    }
}
