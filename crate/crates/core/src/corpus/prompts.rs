//! Instruct-prompt templates and their strict inverse parsers.

use super::{BloomLevel, CorpusError, EvalRecord, QGenRecord};

/// Shared instruction header; every prompt contains it exactly once.
pub const INSTRUCTION_HEADER: &str = "Follow the instruction and complete the task.";

const QGEN_INSTR_PREFIX: &str = "### Instruction:\nGenerate one ";
const QGEN_INSTR_SUFFIX: &str = " question from the passage.";
const INPUT_MARK: &str = "### Input:\n";
const QUESTION_MARK: &str = "### Question:\n";
const CRITERIA_MARK: &str = "### Criteria:\n";
const ANSWER_MARK: &str = "### Student Answer:\n";
const RESPONSE_MARK: &str = "### Response:\n";

/// Prompt text plus the supervised completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub prompt: String,
    pub target: String,
}

/// Question-generation prompt: header, level-specific instruction, context.
/// The target is the gold question.
pub fn build_qgen_prompt(record: &QGenRecord) -> PromptPair {
    let prompt = format!(
        "{INSTRUCTION_HEADER}\n\n{QGEN_INSTR_PREFIX}{}{QGEN_INSTR_SUFFIX}\n\n{INPUT_MARK}{}\n\n{RESPONSE_MARK}",
        record.bloom_level, record.context
    );
    PromptPair {
        prompt,
        target: record.question.clone(),
    }
}

/// Invert [`build_qgen_prompt`]: recover `(bloom_level, context)`.
pub fn parse_qgen_prompt(prompt: &str) -> Result<(BloomLevel, String), CorpusError> {
    let rest = prompt
        .strip_prefix(INSTRUCTION_HEADER)
        .and_then(|r| r.strip_prefix("\n\n"))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing instruction header".into()))?;
    let rest = rest
        .strip_prefix(QGEN_INSTR_PREFIX)
        .ok_or_else(|| CorpusError::TemplateMismatch("missing instruction line".into()))?;
    let (level_word, rest) = rest
        .split_once(QGEN_INSTR_SUFFIX)
        .ok_or_else(|| CorpusError::TemplateMismatch("missing instruction suffix".into()))?;
    let level = match level_word {
        "Analysis" => BloomLevel::Analysis,
        "Synthesis" => BloomLevel::Synthesis,
        "Evaluation" => BloomLevel::Evaluation,
        other => {
            return Err(CorpusError::TemplateMismatch(format!(
                "unknown level {other:?}"
            )))
        }
    };
    let rest = rest
        .strip_prefix("\n\n")
        .and_then(|r| r.strip_prefix(INPUT_MARK))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing input block".into()))?;
    let context = rest
        .strip_suffix(RESPONSE_MARK)
        .and_then(|r| r.strip_suffix("\n\n"))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing response marker".into()))?;
    Ok((level, context.to_string()))
}

/// Serialized rubric-score tail appended to evaluation targets.
pub fn format_score_line(grammar: u8, coherence: u8, relevance: u8) -> String {
    format!("Grammar: {grammar}/10 | Coherence: {coherence}/10 | Relevance: {relevance}/10")
}

/// Answer-evaluation prompt: header, question, criteria, student answer.
/// The target is the evaluation text followed by the score line.
pub fn build_eval_prompt(record: &EvalRecord) -> PromptPair {
    let prompt = format!(
        "{INSTRUCTION_HEADER}\n\n{QUESTION_MARK}{}\n\n{CRITERIA_MARK}{}\n\n{ANSWER_MARK}{}\n\n{RESPONSE_MARK}",
        record.question, record.evaluation_criteria, record.student_answer
    );
    let target = format!(
        "{}\n{}",
        record.answer_evaluation,
        format_score_line(
            record.grammar_score,
            record.coherence_score,
            record.relevance_score
        )
    );
    PromptPair { prompt, target }
}

/// Invert [`build_eval_prompt`]: recover `(question, criteria, answer)`.
pub fn parse_eval_prompt(prompt: &str) -> Result<(String, String, String), CorpusError> {
    let rest = prompt
        .strip_prefix(INSTRUCTION_HEADER)
        .and_then(|r| r.strip_prefix("\n\n"))
        .and_then(|r| r.strip_prefix(QUESTION_MARK))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing question block".into()))?;
    let (question, rest) = rest
        .split_once(&format!("\n\n{CRITERIA_MARK}"))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing criteria block".into()))?;
    let (criteria, rest) = rest
        .split_once(&format!("\n\n{ANSWER_MARK}"))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing student answer block".into()))?;
    let answer = rest
        .strip_suffix(RESPONSE_MARK)
        .and_then(|r| r.strip_suffix("\n\n"))
        .ok_or_else(|| CorpusError::TemplateMismatch("missing response marker".into()))?;
    Ok((question.to_string(), criteria.to_string(), answer.to_string()))
}

/// Strictly parse `Grammar: g/10 | Coherence: c/10 | Relevance: r/10` out
/// of generated text. A missing field is a structured error, never a guess.
pub fn parse_score_line(text: &str) -> Result<(u8, u8, u8), CorpusError> {
    let mut scores = [0u8; 3];
    for (slot, field) in [(0, "Grammar"), (1, "Coherence"), (2, "Relevance")] {
        let marker = format!("{field}: ");
        let start = text
            .find(&marker)
            .ok_or(CorpusError::MissingScoreField {
                field: match field {
                    "Grammar" => "Grammar",
                    "Coherence" => "Coherence",
                    _ => "Relevance",
                },
            })?;
        let tail = &text[start + marker.len()..];
        let digits = tail
            .split_once("/10")
            .map(|(d, _)| d.trim())
            .ok_or_else(|| CorpusError::MalformedScore {
                context: tail.chars().take(16).collect(),
            })?;
        let value: u8 = digits.parse().map_err(|_| CorpusError::MalformedScore {
            context: digits.to_string(),
        })?;
        if value > 10 {
            return Err(CorpusError::MalformedScore {
                context: format!("{value}/10"),
            });
        }
        scores[slot] = value;
    }
    Ok((scores[0], scores[1], scores[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{sample_eval, sample_qgen};

    #[test]
    fn qgen_prompt_contains_level_and_header_once() {
        let pair = build_qgen_prompt(&sample_qgen());
        assert_eq!(pair.prompt.matches(INSTRUCTION_HEADER).count(), 1);
        assert!(pair.prompt.contains("Analysis"));
        assert_eq!(pair.target, sample_qgen().question);
    }

    #[test]
    fn same_context_different_levels_differ_only_in_level_clause() {
        let a = sample_qgen();
        let mut b = sample_qgen();
        b.bloom_level = super::super::BloomLevel::Evaluation;
        let pa = build_qgen_prompt(&a).prompt;
        let pb = build_qgen_prompt(&b).prompt;
        assert_eq!(pa.replace("Analysis", "Evaluation"), pb);
    }

    #[test]
    fn qgen_prompt_parses_back() {
        let record = sample_qgen();
        let pair = build_qgen_prompt(&record);
        let (level, context) = parse_qgen_prompt(&pair.prompt).unwrap();
        assert_eq!(level, record.bloom_level);
        assert_eq!(context, record.context);
    }

    #[test]
    fn eval_target_tail_is_exact_for_full_scores() {
        let mut record = sample_eval();
        record.grammar_score = 10;
        record.coherence_score = 10;
        record.relevance_score = 10;
        let pair = build_eval_prompt(&record);
        assert!(pair
            .target
            .ends_with("Grammar: 10/10 | Coherence: 10/10 | Relevance: 10/10"));
    }

    #[test]
    fn score_line_roundtrip_and_strictness() {
        let line = format_score_line(7, 4, 9);
        assert_eq!(parse_score_line(&line).unwrap(), (7, 4, 9));

        let missing = "Grammar: 7/10 | Relevance: 9/10";
        assert!(matches!(
            parse_score_line(missing),
            Err(CorpusError::MissingScoreField { field: "Coherence" })
        ));

        assert!(parse_score_line("Grammar: 11/10 | Coherence: 1/10 | Relevance: 1/10").is_err());
        assert!(parse_score_line("Grammar: x/10 | Coherence: 1/10 | Relevance: 1/10").is_err());
    }

    #[test]
    fn eval_prompt_parses_back() {
        let record = sample_eval();
        let pair = build_eval_prompt(&record);
        let (q, c, a) = parse_eval_prompt(&pair.prompt).unwrap();
        assert_eq!(q, record.question);
        assert_eq!(c, record.evaluation_criteria);
        assert_eq!(a, record.student_answer);
    }

    #[test]
    fn parser_rejects_foreign_text() {
        assert!(parse_qgen_prompt("nonsense").is_err());
        assert!(parse_eval_prompt("more nonsense").is_err());
    }
}
