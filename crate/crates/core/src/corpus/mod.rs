//! Dataset records, instruct-prompt construction, byte-level tokenization,
//! JSONL serialization, and stratified splitting.

mod jsonl;
mod prompts;
mod split;
mod tokenizer;

pub use jsonl::{read_jsonl, write_jsonl};
pub use prompts::{
    build_eval_prompt, build_qgen_prompt, parse_eval_prompt, parse_qgen_prompt,
    parse_score_line, PromptPair, INSTRUCTION_HEADER,
};
pub use split::{stratified_split, SplitOutcome, SplitRatios, PAPER_SPLIT};
pub use tokenizer::{detokenize, encode_pair, tokenize, BOS, EOS, PAD, SEP, VOCAB_SIZE};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("field {field}: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("score line missing field {field}")]
    MissingScoreField { field: &'static str },
    #[error("score line malformed near {context:?}")]
    MalformedScore { context: String },
    #[error("prompt does not match the template: {0}")]
    TemplateMismatch(String),
    #[error("split ratios {0:?} must sum to 1")]
    BadRatios(Vec<f64>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Upper Bloom's-taxonomy levels targeted by generated questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BloomLevel {
    Analysis,
    Synthesis,
    Evaluation,
}

impl BloomLevel {
    pub const ALL: [BloomLevel; 3] = [
        BloomLevel::Analysis,
        BloomLevel::Synthesis,
        BloomLevel::Evaluation,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            BloomLevel::Analysis => "analysis",
            BloomLevel::Synthesis => "synthesis",
            BloomLevel::Evaluation => "evaluation",
        }
    }
}

impl fmt::Display for BloomLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BloomLevel::Analysis => write!(f, "Analysis"),
            BloomLevel::Synthesis => write!(f, "Synthesis"),
            BloomLevel::Evaluation => write!(f, "Evaluation"),
        }
    }
}

/// Five-tier answer correctness scale, best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerQuality {
    Perfect,
    Moderate,
    Average,
    BelowAverage,
    Imperfect,
}

impl AnswerQuality {
    pub const ALL: [AnswerQuality; 5] = [
        AnswerQuality::Perfect,
        AnswerQuality::Moderate,
        AnswerQuality::Average,
        AnswerQuality::BelowAverage,
        AnswerQuality::Imperfect,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            AnswerQuality::Perfect => "perfect",
            AnswerQuality::Moderate => "moderate",
            AnswerQuality::Average => "average",
            AnswerQuality::BelowAverage => "below-average",
            AnswerQuality::Imperfect => "imperfect",
        }
    }
}

impl fmt::Display for AnswerQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerQuality::Perfect => write!(f, "Perfect"),
            AnswerQuality::Moderate => write!(f, "Moderate"),
            AnswerQuality::Average => write!(f, "Average"),
            AnswerQuality::BelowAverage => write!(f, "BelowAverage"),
            AnswerQuality::Imperfect => write!(f, "Imperfect"),
        }
    }
}

/// Records that can vouch for their own field invariants after parsing.
pub trait Validate {
    fn validate(&self) -> Result<(), CorpusError>;
}

/// One subjective-question-generation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QGenRecord {
    pub id: String,
    pub subject: String,
    pub topic: String,
    pub subtopic: String,
    pub context: String,
    pub question: String,
    #[serde(rename = "bloomLevel")]
    pub bloom_level: BloomLevel,
}

impl Validate for QGenRecord {
    fn validate(&self) -> Result<(), CorpusError> {
        let nonempty = |field: &'static str, value: &str| {
            if value.trim().is_empty() {
                Err(CorpusError::InvalidField {
                    field,
                    reason: "must be nonempty".into(),
                })
            } else {
                Ok(())
            }
        };
        nonempty("id", &self.id)?;
        nonempty("subject", &self.subject)?;
        nonempty("topic", &self.topic)?;
        nonempty("subtopic", &self.subtopic)?;
        nonempty("context", &self.context)?;
        nonempty("question", &self.question)
    }
}

/// One answer-evaluation sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    #[serde(rename = "subjectiveQuestion")]
    pub question: String,
    #[serde(rename = "evaluationCriteria")]
    pub evaluation_criteria: String,
    #[serde(rename = "studentAnswer")]
    pub student_answer: String,
    #[serde(rename = "answerQuality")]
    pub answer_quality: AnswerQuality,
    #[serde(rename = "answerEvaluation")]
    pub answer_evaluation: String,
    #[serde(rename = "grammarScore")]
    pub grammar_score: u8,
    #[serde(rename = "coherenceScore")]
    pub coherence_score: u8,
    #[serde(rename = "relevanceScore")]
    pub relevance_score: u8,
}

impl Validate for EvalRecord {
    fn validate(&self) -> Result<(), CorpusError> {
        let nonempty = |field: &'static str, value: &str| {
            if value.trim().is_empty() {
                Err(CorpusError::InvalidField {
                    field,
                    reason: "must be nonempty".into(),
                })
            } else {
                Ok(())
            }
        };
        nonempty("id", &self.id)?;
        nonempty("subjectiveQuestion", &self.question)?;
        nonempty("evaluationCriteria", &self.evaluation_criteria)?;
        nonempty("studentAnswer", &self.student_answer)?;
        nonempty("answerEvaluation", &self.answer_evaluation)?;
        for (field, score) in [
            ("grammarScore", self.grammar_score),
            ("coherenceScore", self.coherence_score),
            ("relevanceScore", self.relevance_score),
        ] {
            if score > 10 {
                return Err(CorpusError::InvalidField {
                    field,
                    reason: format!("score {score} outside 0..=10"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_qgen() -> QGenRecord {
        QGenRecord {
            id: "physics-optics-refraction-analysis".into(),
            subject: "Physics".into(),
            topic: "Optics".into(),
            subtopic: "Refraction".into(),
            context: "Light bends when it crosses between media of different density.".into(),
            question: "Break down why the bending angle depends on both media.".into(),
            bloom_level: BloomLevel::Analysis,
        }
    }

    pub(crate) fn sample_eval() -> EvalRecord {
        EvalRecord {
            id: "eval-0001-average".into(),
            question: "Explain how refraction produces rainbows.".into(),
            evaluation_criteria: "Mentions dispersion, wavelength dependence, and geometry.".into(),
            student_answer: "Rainbows happen because light slows in water drops.".into(),
            answer_quality: AnswerQuality::Average,
            answer_evaluation: "Captures the mechanism but omits wavelength dependence.".into(),
            grammar_score: 8,
            coherence_score: 6,
            relevance_score: 7,
        }
    }

    #[test]
    fn validation_accepts_good_records() {
        sample_qgen().validate().unwrap();
        sample_eval().validate().unwrap();
    }

    #[test]
    fn validation_rejects_empty_fields_and_bad_scores() {
        let mut r = sample_qgen();
        r.context = "  ".into();
        assert!(matches!(
            r.validate(),
            Err(CorpusError::InvalidField { field: "context", .. })
        ));
        let mut e = sample_eval();
        e.grammar_score = 11;
        assert!(matches!(
            e.validate(),
            Err(CorpusError::InvalidField { field: "grammarScore", .. })
        ));
    }

    /// Every expected `"name":` marker appears exactly once, in definition
    /// order (the sample fixtures contain no such markers in their values).
    fn assert_field_order(json: &str, names: &[&str]) {
        let mut last = 0;
        for name in names {
            let marker = format!("\"{name}\":");
            assert_eq!(json.matches(&marker).count(), 1, "field {name} in {json}");
            let pos = json.find(&marker).unwrap();
            assert!(pos >= last, "field {name} out of order");
            last = pos;
        }
    }

    #[test]
    fn serde_uses_exact_wire_field_names() {
        let json = serde_json::to_string(&sample_qgen()).unwrap();
        assert_field_order(
            &json,
            &["id", "subject", "topic", "subtopic", "context", "question", "bloomLevel"],
        );
        let json = serde_json::to_string(&sample_eval()).unwrap();
        assert_field_order(
            &json,
            &[
                "id",
                "subjectiveQuestion",
                "evaluationCriteria",
                "studentAnswer",
                "answerQuality",
                "answerEvaluation",
                "grammarScore",
                "coherenceScore",
                "relevanceScore",
            ],
        );
    }
}
