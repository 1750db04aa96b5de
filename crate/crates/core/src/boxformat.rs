//! Box-string wire format and final-answer extraction.
//!
//! The format is `[x_min, y_min, x_max, y_max]` with exactly two decimals and
//! `", "` separators; multiple boxes are joined by `" and "`. Serialization is
//! bit-exact. Parsing is lenient: bracketed 4-tuples are pulled out of any
//! surrounding prose, and tuples that violate box invariants are dropped with a
//! warning rather than clamped.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;

/// Delimiter closing the thinking block of a thinking-model response.
pub const THINK_CLOSE: &str = "</think>";
/// Opening tag, stripped from the recorded thinking text when present.
pub const THINK_OPEN: &str = "<think>";

const BOX_JOINER: &str = " and ";

/// A generated response split into its thinking block and scored answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub thinking: Option<String>,
    pub final_answer: Option<String>,
    pub token_count: usize,
}

impl ModelResponse {
    /// Characters in the final answer, 0 when there is none.
    pub fn answer_chars(&self) -> usize {
        self.final_answer
            .as_deref()
            .map_or(0, |a| a.chars().count())
    }

    pub fn with_token_count(mut self, token_count: usize) -> Self {
        self.token_count = token_count;
        self
    }
}

/// Boxes recovered from free text, in textual order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoxAnswer {
    pub boxes: Vec<BoundingBox>,
    pub parse_warnings: Vec<String>,
}

fn write_coord(out: &mut String, v: f64) {
    // `+ 0.0` folds -0.0 into 0.0 so it never renders as "-0.00"
    write!(out, "{:.2}", v + 0.0).expect("writing to a String cannot fail");
}

/// Render boxes in the two-decimal wire format. The empty list renders as "".
pub fn serialize_boxes(boxes: &[BoundingBox]) -> String {
    let mut out = String::with_capacity(boxes.len() * 26);
    for (i, b) in boxes.iter().enumerate() {
        if i > 0 {
            out.push_str(BOX_JOINER);
        }
        out.push('[');
        for (k, c) in b.coords().into_iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            write_coord(&mut out, c);
        }
        out.push(']');
    }
    out
}

fn tuple_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";
        let sep = r"\s*,\s*";
        let pattern = format!(r"\[\s*{num}{sep}{num}{sep}{num}{sep}{num}\s*\]");
        Regex::new(&pattern).expect("static pattern compiles")
    })
}

/// Extract every bracketed 4-tuple of reals from `text`.
///
/// Never fails: text without any tuple yields an empty answer.
pub fn parse_boxes(text: &str) -> BoxAnswer {
    let mut answer = BoxAnswer::default();
    for caps in tuple_regex().captures_iter(text) {
        let mut coords = [0.0f64; 4];
        let mut ok = true;
        for (k, slot) in coords.iter_mut().enumerate() {
            match caps[k + 1].parse::<f64>() {
                Ok(v) => *slot = v,
                Err(_) => ok = false,
            }
        }
        let whole = &caps[0];
        if !ok {
            answer
                .parse_warnings
                .push(format!("unreadable number in {whole}"));
            continue;
        }
        match BoundingBox::try_from(coords) {
            Ok(b) => answer.boxes.push(b),
            Err(e) => answer.parse_warnings.push(format!("dropped {whole}: {e}")),
        }
    }
    answer
}

/// Split a raw generation into thinking block and final answer.
///
/// Thinking responses are split on the last [`THINK_CLOSE`]; the answer is the
/// trimmed text after it, and is absent when the delimiter never appears.
/// Non-thinking responses use the whole raw text as the answer.
pub fn extract_final_answer(raw: &str, is_thinking: bool) -> ModelResponse {
    let token_count = raw.split_whitespace().count();
    if !is_thinking {
        return ModelResponse {
            raw_text: raw.to_owned(),
            thinking: None,
            final_answer: Some(raw.to_owned()),
            token_count,
        };
    }
    let (thinking, final_answer) = match raw.rfind(THINK_CLOSE) {
        Some(idx) => {
            let before = raw[..idx].trim();
            let before = before.strip_prefix(THINK_OPEN).unwrap_or(before).trim();
            let after = raw[idx + THINK_CLOSE.len()..].trim();
            (Some(before.to_owned()), Some(after.to_owned()))
        }
        None => {
            let body = raw.trim();
            let body = body.strip_prefix(THINK_OPEN).unwrap_or(body).trim();
            (Some(body.to_owned()), None)
        }
    };
    ModelResponse {
        raw_text: raw.to_owned(),
        thinking,
        final_answer,
        token_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(c: [f64; 4]) -> BoundingBox {
        BoundingBox::try_from(c).unwrap()
    }

    #[test]
    fn serialize_examples_are_bit_exact() {
        assert_eq!(
            serialize_boxes(&[bx([0.0, 0.0, 0.5, 0.5])]),
            "[0.00, 0.00, 0.50, 0.50]"
        );
        assert_eq!(serialize_boxes(&[]), "");
        assert_eq!(
            serialize_boxes(&[bx([0.0, 0.0, 0.5, 0.5]), bx([0.6, 0.6, 1.0, 1.0])]),
            "[0.00, 0.00, 0.50, 0.50] and [0.60, 0.60, 1.00, 1.00]"
        );
    }

    #[test]
    fn negative_zero_renders_without_sign() {
        assert_eq!(
            serialize_boxes(&[bx([-0.0, 0.0, 0.5, 0.5])]),
            "[0.00, 0.00, 0.50, 0.50]"
        );
    }

    #[test]
    fn parse_examples() {
        let one = parse_boxes("[0.00, 0.00, 0.50, 0.50]");
        assert_eq!(one.boxes, vec![bx([0.0, 0.0, 0.5, 0.5])]);
        assert!(one.parse_warnings.is_empty());

        let prose =
            parse_boxes("The nodule is at [0.10,0.20,0.30,0.40] and [0.50, 0.55, 0.70, 0.80].");
        assert_eq!(
            prose.boxes,
            vec![bx([0.1, 0.2, 0.3, 0.4]), bx([0.5, 0.55, 0.7, 0.8])]
        );

        let inverted = parse_boxes("[0.9, 0.9, 0.1, 0.1]");
        assert!(inverted.boxes.is_empty());
        assert_eq!(inverted.parse_warnings.len(), 1);
    }

    #[test]
    fn parse_tolerates_garbage() {
        assert_eq!(parse_boxes("no boxes found"), BoxAnswer::default());
        assert!(parse_boxes("[0.1, 0.2, 0.3]").boxes.is_empty());
        assert!(parse_boxes("[a, b, c, d]").boxes.is_empty());
        let out_of_range = parse_boxes("[0.1, 0.2, 1.30, 0.4] then [ .1 ,.2,  .3 , .4 ]");
        assert_eq!(out_of_range.boxes, vec![bx([0.1, 0.2, 0.3, 0.4])]);
        assert_eq!(out_of_range.parse_warnings.len(), 1);
        let neg = parse_boxes("[-0.10, 0.2, 0.3, 0.4]");
        assert!(neg.boxes.is_empty());
    }

    #[test]
    fn extract_examples() {
        let r = extract_final_answer("reasoning…</think>[0.00, 0.00, 0.50, 0.50]", true);
        assert_eq!(r.final_answer.as_deref(), Some("[0.00, 0.00, 0.50, 0.50]"));
        assert_eq!(r.thinking.as_deref(), Some("reasoning…"));

        let r = extract_final_answer("[0.00, 0.00, 0.50, 0.50]", false);
        assert_eq!(r.final_answer.as_deref(), Some("[0.00, 0.00, 0.50, 0.50]"));
        assert!(r.thinking.is_none());

        let r = extract_final_answer("endless reasoning with no delimiter", true);
        assert!(r.final_answer.is_none());
    }

    #[test]
    fn extract_splits_on_last_delimiter() {
        let r = extract_final_answer(
            "<think>I should close with </think> later</think> a b",
            true,
        );
        assert_eq!(r.final_answer.as_deref(), Some("a b"));
        assert_eq!(
            r.thinking.as_deref(),
            Some("I should close with </think> later")
        );
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BoundingBox>> {
        prop::collection::vec(crate::geometry::tests::arb_box(), 0..6)
    }

    proptest! {
        #[test]
        fn round_trip_within_rounding(boxes in arb_boxes()) {
            let parsed = parse_boxes(&serialize_boxes(&boxes));
            prop_assert_eq!(parsed.boxes.len(), boxes.len());
            prop_assert!(parsed.parse_warnings.is_empty());
            for (a, b) in boxes.iter().zip(&parsed.boxes) {
                for (x, y) in a.coords().iter().zip(b.coords()) {
                    prop_assert!((x - y).abs() <= 0.005 + 1e-12);
                }
            }
        }

        #[test]
        fn parse_never_returns_invalid_boxes(text in ".{0,80}", nums in prop::collection::vec(-2.0..2.0f64, 4)) {
            let s = format!("{text}[{}, {}, {}, {}]{text}", nums[0], nums[1], nums[2], nums[3]);
            for b in parse_boxes(&s).boxes {
                prop_assert!(BoundingBox::try_from(b.coords()).is_ok());
            }
        }

        #[test]
        fn extraction_is_idempotent(raw in ".{0,60}", thinking in any::<bool>()) {
            let first = extract_final_answer(&raw, thinking);
            if let Some(answer) = first.final_answer {
                let again = extract_final_answer(&answer, false);
                prop_assert_eq!(again.final_answer, Some(answer));
            }
        }
    }
}
