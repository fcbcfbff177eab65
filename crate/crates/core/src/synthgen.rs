//! Synthetic dataset generation: topic registry with duplicate prevention,
//! generation-request construction, response ingestion, and a pluggable
//! generator-client boundary with a deterministic offline stub.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, HttpTextClient};
use crate::corpus::{AnswerQuality, BloomLevel, EvalRecord, QGenRecord, Validate};
use crate::numerics::Rng;

const CONTEXT_MARK: &str = "### CONTEXT";
const ANALYSIS_MARK: &str = "### ANALYSIS";
const SYNTHESIS_MARK: &str = "### SYNTHESIS";
const EVALUATION_MARK: &str = "### EVALUATION";
const CRITERIA_MARK: &str = "### CRITERIA";
const STUDENT_ANSWER_MARK: &str = "### STUDENT_ANSWER";
const EVAL_TEXT_MARK: &str = "### EVALUATION";
const SCORES_MARK: &str = "### SCORES";

const RETRY_ATTEMPTS: usize = 3;
const RETRY_BASE_DELAY_MS: u64 = 50;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("topic registry exhausted: every triple has been used")]
    Exhausted,
    #[error("registry file invalid: {0}")]
    BadRegistry(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("response rejected: missing or empty {CONTEXT_MARK} block")]
    MissingContext,
    #[error("response block {block} malformed: {reason}")]
    MalformedBlock { block: String, reason: String },
    #[error("generator failed after {RETRY_ATTEMPTS} attempts: {last}")]
    ClientFailed { last: String },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// A (subject, topic, subtopic) triple drawn from the registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub subject: String,
    pub topic: String,
    pub subtopic: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryFile {
    subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubjectEntry {
    name: String,
    topics: Vec<TopicEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopicEntry {
    name: String,
    subtopics: Vec<String>,
}

/// Curated subjects/topics/subtopics tree with per-triple used flags.
/// Flags are monotone: a sampled triple is never handed out again.
#[derive(Debug, Clone)]
pub struct TopicRegistry {
    triples: Vec<Assignment>,
    used: BTreeSet<usize>,
}

impl TopicRegistry {
    pub fn from_json(json: &str) -> Result<Self, SynthError> {
        let file: RegistryFile =
            serde_json::from_str(json).map_err(|e| SynthError::BadRegistry(e.to_string()))?;
        let mut triples = Vec::new();
        let mut seen = BTreeSet::new();
        for subject in &file.subjects {
            for topic in &subject.topics {
                for subtopic in &topic.subtopics {
                    let key = format!("{}\u{1f}{}\u{1f}{}", subject.name, topic.name, subtopic);
                    if !seen.insert(key) {
                        return Err(SynthError::BadRegistry(format!(
                            "duplicate triple ({}, {}, {subtopic})",
                            subject.name, topic.name
                        )));
                    }
                    if subject.name.trim().is_empty()
                        || topic.name.trim().is_empty()
                        || subtopic.trim().is_empty()
                    {
                        return Err(SynthError::BadRegistry("empty tree entry".into()));
                    }
                    triples.push(Assignment {
                        subject: subject.name.clone(),
                        topic: topic.name.clone(),
                        subtopic: subtopic.clone(),
                    });
                }
            }
        }
        if triples.is_empty() {
            return Err(SynthError::BadRegistry("registry has no triples".into()));
        }
        Ok(TopicRegistry {
            triples,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let json = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&json)
    }

    pub fn total(&self) -> usize {
        self.triples.len()
    }

    pub fn used_count(&self) -> usize {
        self.used.len()
    }

    pub fn remaining(&self) -> usize {
        self.triples.len() - self.used.len()
    }
}

/// Uniformly sample an unused triple and mark it used.
pub fn sample_assignment(
    registry: &mut TopicRegistry,
    rng: &mut Rng,
) -> Result<Assignment, SynthError> {
    let unused: Vec<usize> = (0..registry.triples.len())
        .filter(|i| !registry.used.contains(i))
        .collect();
    if unused.is_empty() {
        return Err(SynthError::Exhausted);
    }
    let pick = unused[rng.below(unused.len())];
    registry.used.insert(pick);
    Ok(registry.triples[pick].clone())
}

/// Directive asking for one context passage plus one question per upper
/// Bloom level, in the strict sentinel wire format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub assignment: Assignment,
    pub directive: String,
}

pub fn build_generation_request(assignment: &Assignment) -> GenerationRequest {
    let directive = format!(
        "Subject: {}\nTopic: {}\nSubtopic: {}\n\n\
         Write one short context passage (2-3 sentences) about the subtopic, \
         then one subjective question per level below.\n\
         Respond exactly in this format:\n\
         {CONTEXT_MARK}\n<passage>\n\
         {ANALYSIS_MARK}\n<one Analysis question>\n\
         {SYNTHESIS_MARK}\n<one Synthesis question>\n\
         {EVALUATION_MARK}\n<one Evaluation question>",
        assignment.subject, assignment.topic, assignment.subtopic
    );
    GenerationRequest {
        assignment: assignment.clone(),
        directive,
    }
}

/// Directive asking for rubric, a student answer of the named quality
/// tier, evaluation text, and the three scores.
pub fn build_eval_generation_request(seed_question: &str, tier: AnswerQuality) -> String {
    format!(
        "Question: {seed_question}\nRequired answer quality: {tier}\n\n\
         Write grading criteria for the question, a student answer whose \
         correctness matches the required quality, an evaluation of that \
         answer, and integer scores.\n\
         Respond exactly in this format:\n\
         {CRITERIA_MARK}\n<rubric>\n\
         {STUDENT_ANSWER_MARK}\n<answer>\n\
         {EVAL_TEXT_MARK}\n<assessment>\n\
         {SCORES_MARK}\nGrammar: <0-10>/10 | Coherence: <0-10>/10 | Relevance: <0-10>/10"
    )
}

/// Request text in, structured response text out. Implementations carry
/// their own transport; retry policy lives in the pipeline.
pub trait GeneratorClient {
    fn generate(&mut self, request: &str) -> Result<String, SynthError>;
}

impl GeneratorClient for HttpTextClient {
    fn generate(&mut self, request: &str) -> Result<String, SynthError> {
        Ok(self.complete(request)?)
    }
}

fn fnv64(text: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for byte in text.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic offline generator: template-filled responses, seeded per
/// request text so reruns are byte-identical.
#[derive(Debug, Clone)]
pub struct StubGenerator {
    seed: u64,
}

impl StubGenerator {
    pub fn new(seed: u64) -> Self {
        StubGenerator { seed }
    }

    fn field<'a>(request: &'a str, label: &str) -> Option<&'a str> {
        request
            .lines()
            .find_map(|line| line.strip_prefix(&format!("{label}: ")))
    }

    fn qgen_response(&self, request: &str) -> Option<String> {
        let subject = Self::field(request, "Subject")?;
        let topic = Self::field(request, "Topic")?;
        let subtopic = Self::field(request, "Subtopic")?;
        let mut rng = Rng::with_stream(self.seed, fnv64(request));
        let angle = [
            "practical work",
            "everyday reasoning",
            "modern research",
            "classroom problems",
        ][rng.below(4)];
        let verb = ["shapes", "drives", "anchors"][rng.below(3)];
        Some(format!(
            "{CONTEXT_MARK}\n\
             {subtopic} is a core idea in {topic}. In {subject} it {verb} how {angle} is handled.\n\
             {ANALYSIS_MARK}\n\
             Break down how {subtopic} works in the passage and how its assumptions fit together.\n\
             {SYNTHESIS_MARK}\n\
             Combine {subtopic} with another idea from {topic} and outline the scenario that results.\n\
             {EVALUATION_MARK}\n\
             Judge how well {subtopic} explains {topic}, using evidence from the passage."
        ))
    }

    fn eval_response(&self, request: &str) -> Option<String> {
        let question = Self::field(request, "Question")?;
        let tier: AnswerQuality = match Self::field(request, "Required answer quality")? {
            "Perfect" => AnswerQuality::Perfect,
            "Moderate" => AnswerQuality::Moderate,
            "Average" => AnswerQuality::Average,
            "BelowAverage" => AnswerQuality::BelowAverage,
            "Imperfect" => AnswerQuality::Imperfect,
            _ => return None,
        };
        let mut rng = Rng::with_stream(self.seed, fnv64(request));
        let (lo, hi, answer, verdict) = match tier {
            AnswerQuality::Perfect => (
                9,
                10,
                "The answer works through every part of the question, names the key mechanism, gives a concrete example, and closes by connecting the result back to the prompt.",
                "Complete and precise; covers every rubric point with a correct example.",
            ),
            AnswerQuality::Moderate => (
                7,
                8,
                "The answer explains the main mechanism correctly and gives a partial example, though one rubric point is only touched in passing.",
                "Largely correct with one underdeveloped rubric point.",
            ),
            AnswerQuality::Average => (
                5,
                6,
                "The answer states the general idea but stays vague about the mechanism and offers no example.",
                "Captures the gist yet misses the supporting detail the rubric asks for.",
            ),
            AnswerQuality::BelowAverage => (
                3,
                4,
                "The answer gestures at the topic but mixes up the mechanism and drifts off the question.",
                "Mostly off target; the central mechanism is misstated.",
            ),
            AnswerQuality::Imperfect => (
                0,
                2,
                "The answer is unrelated to the question.",
                "Does not address the question at all.",
            ),
        };
        let span = hi - lo + 1;
        let g = lo + rng.below(span);
        let c = lo + rng.below(span);
        let r = lo + rng.below(span);
        Some(format!(
            "{CRITERIA_MARK}\n\
             Award full credit when the answer to \"{question}\" names the mechanism, supports it with an example, and stays on the question.\n\
             {STUDENT_ANSWER_MARK}\n{answer}\n\
             {EVAL_TEXT_MARK}\n{verdict}\n\
             {SCORES_MARK}\nGrammar: {g}/10 | Coherence: {c}/10 | Relevance: {r}/10"
        ))
    }
}

impl GeneratorClient for StubGenerator {
    fn generate(&mut self, request: &str) -> Result<String, SynthError> {
        self.qgen_response(request)
            .or_else(|| self.eval_response(request))
            .ok_or_else(|| SynthError::MalformedBlock {
                block: "request".into(),
                reason: "stub could not recognize the request template".into(),
            })
    }
}

fn slug(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_dash = true;
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
            last_dash = false;
        } else if !last_dash {
            out.push('-');
            last_dash = true;
        }
    }
    out.trim_end_matches('-').to_string()
}

/// Split a sentinel-formatted response into (marker, body) pairs.
fn split_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks: Vec<(String, String)> = Vec::new();
    for line in text.lines() {
        if line.starts_with("### ") {
            blocks.push((line.trim().to_string(), String::new()));
        } else if let Some((_, body)) = blocks.last_mut() {
            if !body.is_empty() {
                body.push('\n');
            }
            body.push_str(line);
        }
    }
    for (_, body) in &mut blocks {
        *body = body.trim().to_string();
    }
    blocks
}

/// One skipped level with its reason; malformed blocks never become rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipReport {
    pub id_prefix: String,
    pub level: BloomLevel,
    pub reason: String,
}

/// Parse a generation response into up to three records (one per level).
/// A missing context rejects the whole response; a missing level block
/// skips just that level with a report.
pub fn ingest_generation(
    response_text: &str,
    assignment: &Assignment,
) -> Result<(Vec<QGenRecord>, Vec<SkipReport>), SynthError> {
    let blocks = split_blocks(response_text);
    let find = |mark: &str| {
        blocks
            .iter()
            .find(|(m, _)| m == mark)
            .map(|(_, body)| body.clone())
    };
    let context = find(CONTEXT_MARK).filter(|c| !c.is_empty());
    let Some(context) = context else {
        return Err(SynthError::MissingContext);
    };

    let id_prefix = format!(
        "{}-{}-{}",
        slug(&assignment.subject),
        slug(&assignment.topic),
        slug(&assignment.subtopic)
    );
    let mut records = Vec::new();
    let mut skips = Vec::new();
    for (level, mark) in [
        (BloomLevel::Analysis, ANALYSIS_MARK),
        (BloomLevel::Synthesis, SYNTHESIS_MARK),
        (BloomLevel::Evaluation, EVALUATION_MARK),
    ] {
        match find(mark).filter(|q| !q.is_empty()) {
            Some(question) => {
                let record = QGenRecord {
                    id: format!("{id_prefix}-{}", level.slug()),
                    subject: assignment.subject.clone(),
                    topic: assignment.topic.clone(),
                    subtopic: assignment.subtopic.clone(),
                    context: context.clone(),
                    question,
                    bloom_level: level,
                };
                record.validate().map_err(|e| SynthError::MalformedBlock {
                    block: mark.to_string(),
                    reason: e.to_string(),
                })?;
                records.push(record);
            }
            None => skips.push(SkipReport {
                id_prefix: id_prefix.clone(),
                level,
                reason: format!("missing or empty {mark} block"),
            }),
        }
    }
    Ok((records, skips))
}

/// Parse an eval-generation response into a validated record.
pub fn ingest_eval_generation(
    response_text: &str,
    seed_question: &str,
    tier: AnswerQuality,
    id: &str,
) -> Result<EvalRecord, SynthError> {
    let blocks = split_blocks(response_text);
    let require = |mark: &str| {
        blocks
            .iter()
            .find(|(m, _)| m == mark)
            .map(|(_, body)| body.clone())
            .filter(|b| !b.is_empty())
            .ok_or_else(|| SynthError::MalformedBlock {
                block: mark.to_string(),
                reason: "missing or empty".into(),
            })
    };
    let criteria = require(CRITERIA_MARK)?;
    let student_answer = require(STUDENT_ANSWER_MARK)?;
    let evaluation = require(EVAL_TEXT_MARK)?;
    let score_text = require(SCORES_MARK)?;
    let (g, c, r) =
        crate::corpus::parse_score_line(&score_text).map_err(|e| SynthError::MalformedBlock {
            block: SCORES_MARK.to_string(),
            reason: e.to_string(),
        })?;
    let record = EvalRecord {
        id: id.to_string(),
        question: seed_question.to_string(),
        evaluation_criteria: criteria,
        student_answer,
        answer_quality: tier,
        answer_evaluation: evaluation,
        grammar_score: g,
        coherence_score: c,
        relevance_score: r,
    };
    record.validate().map_err(|e| SynthError::MalformedBlock {
        block: "record".into(),
        reason: e.to_string(),
    })?;
    Ok(record)
}

/// Call the client with the pipeline retry policy: 3 attempts with
/// exponential backoff, then give up with the last error.
pub fn generate_with_retry(
    client: &mut dyn GeneratorClient,
    request: &str,
) -> Result<String, SynthError> {
    let mut last = String::new();
    for attempt in 0..RETRY_ATTEMPTS {
        match client.generate(request) {
            Ok(response) => return Ok(response),
            Err(e) => {
                last = e.to_string();
                if attempt + 1 < RETRY_ATTEMPTS {
                    std::thread::sleep(std::time::Duration::from_millis(
                        RETRY_BASE_DELAY_MS << attempt,
                    ));
                }
            }
        }
    }
    Err(SynthError::ClientFailed { last })
}

/// Everything one generation run produced, including what was skipped.
#[derive(Debug, Default)]
pub struct GenerationOutcome {
    pub records: Vec<QGenRecord>,
    pub skips: Vec<SkipReport>,
    /// Requests abandoned after retries, as (id-prefix, error) pairs.
    pub failures: Vec<(String, String)>,
    /// Set when the registry ran out before `count` was satisfied.
    pub exhausted: bool,
}

/// Drive question generation over `count` assignments (or the whole
/// registry when `None`). Registry exhaustion before `count` stops early
/// and flags the outcome; emitted records are retained either way.
pub fn generate_qgen_dataset(
    registry: &mut TopicRegistry,
    client: &mut dyn GeneratorClient,
    count: Option<usize>,
    rng: &mut Rng,
) -> GenerationOutcome {
    let want = count.unwrap_or(registry.remaining());
    let mut outcome = GenerationOutcome::default();
    for _ in 0..want {
        let assignment = match sample_assignment(registry, rng) {
            Ok(a) => a,
            Err(SynthError::Exhausted) => {
                outcome.exhausted = true;
                break;
            }
            Err(_) => unreachable!("sample_assignment only fails on exhaustion"),
        };
        let request = build_generation_request(&assignment);
        let prefix = format!(
            "{}-{}-{}",
            slug(&assignment.subject),
            slug(&assignment.topic),
            slug(&assignment.subtopic)
        );
        match generate_with_retry(client, &request.directive) {
            Ok(response) => match ingest_generation(&response, &assignment) {
                Ok((records, skips)) => {
                    outcome.records.extend(records);
                    outcome.skips.extend(skips);
                }
                Err(e) => outcome.failures.push((prefix, e.to_string())),
            },
            Err(e) => outcome.failures.push((prefix, e.to_string())),
        }
    }
    outcome
}

/// Generate one eval record per (seed question, quality tier) pair.
pub fn generate_eval_dataset(
    seed_questions: &[String],
    client: &mut dyn GeneratorClient,
) -> (Vec<EvalRecord>, Vec<(String, String)>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (index, question) in seed_questions.iter().enumerate() {
        for tier in AnswerQuality::ALL {
            let id = format!("eval-{index:04}-{}", tier.slug());
            let request = build_eval_generation_request(question, tier);
            match generate_with_retry(client, &request)
                .and_then(|resp| ingest_eval_generation(&resp, question, tier, &id))
            {
                Ok(record) => records.push(record),
                Err(e) => failures.push((id, e.to_string())),
            }
        }
    }
    (records, failures)
}
