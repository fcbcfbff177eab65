//! Anonymized multi-model response ranking and aggregation into per-rank
//! percentage tables.
//!
//! Candidates are relabeled with neutral tokens before the judge sees
//! them; the label->model mapping is persisted separately so ranking stays
//! blind. Aggregation keeps integer counts as ground truth and derives
//! percentages only at render time (half-up, two decimals, trailing zeros
//! trimmed).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, HttpTextClient};
use crate::numerics::Rng;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("need at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("duplicate model name {0:?}")]
    DuplicateModel(String),
    #[error("too many candidates for single-letter labels ({0} > 26)")]
    TooManyCandidates(usize),
    #[error("judge reply is not a permutation of 1..={expected}: {detail}")]
    NotAPermutation { expected: usize, detail: String },
    #[error("sheet {prompt_id}: model set differs from the first sheet")]
    InconsistentModels { prompt_id: String },
    #[error("cannot aggregate zero sheets")]
    NoSheets,
    #[error("rank table inconsistent: {0}")]
    BadTable(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("sheet {prompt_id} has no mapping entry")]
    MissingMapping { prompt_id: String },
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Per-prompt ranking: `labels[i]` received `ranks[i]` (1 = best). The
/// secret label->model mapping travels separately on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankSheet {
    pub prompt_id: String,
    pub labels: Vec<String>,
    pub ranks: Vec<u32>,
    pub mapping: BTreeMap<String, String>,
}

impl RankSheet {
    /// De-anonymize: model name -> rank.
    pub fn model_ranks(&self) -> BTreeMap<String, u32> {
        self.labels
            .iter()
            .zip(&self.ranks)
            .map(|(label, &rank)| (self.mapping[label].clone(), rank))
            .collect()
    }
}

fn label_for(index: usize) -> String {
    format!("Response {}", (b'A' + index as u8) as char)
}

/// Relabel candidates with a uniformly random permutation of neutral
/// tokens. Returns the labeled list (label order) and the secret mapping.
#[allow(clippy::type_complexity)]
pub fn anonymize(
    candidates: &[(String, String)],
    rng: &mut Rng,
) -> Result<(Vec<(String, String)>, BTreeMap<String, String>), JudgeError> {
    if candidates.len() < 2 {
        return Err(JudgeError::TooFewCandidates(candidates.len()));
    }
    if candidates.len() > 26 {
        return Err(JudgeError::TooManyCandidates(candidates.len()));
    }
    let mut seen = BTreeMap::new();
    for (model, _) in candidates {
        if seen.insert(model.clone(), ()).is_some() {
            return Err(JudgeError::DuplicateModel(model.clone()));
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    rng.shuffle(&mut order);
    let mut labeled = Vec::with_capacity(candidates.len());
    let mut mapping = BTreeMap::new();
    for (slot, &original) in order.iter().enumerate() {
        let label = label_for(slot);
        let (model, response) = &candidates[original];
        mapping.insert(label.clone(), model.clone());
        labeled.push((label, response.clone()));
    }
    Ok((labeled, mapping))
}

/// Invert an anonymized sheet back to model attribution; the inverse of
/// [`anonymize`] given the same mapping.
pub fn de_anonymize(
    labeled: &[(String, String)],
    mapping: &BTreeMap<String, String>,
) -> Vec<(String, String)> {
    labeled
        .iter()
        .map(|(label, response)| (mapping[label].clone(), response.clone()))
        .collect()
}

/// A ranking backend: given the prompt and the labeled responses, reply
/// with comma-separated ranks aligned to the label order (best = 1).
pub trait JudgeClient {
    fn rank(
        &mut self,
        prompt: &str,
        labeled: &[(String, String)],
    ) -> Result<String, JudgeError>;
}

/// Offline judge with a fixed transparent heuristic: longer responses rank
/// better; ties break by label order.
#[derive(Debug, Clone, Default)]
pub struct StubJudge;

impl JudgeClient for StubJudge {
    fn rank(
        &mut self,
        _prompt: &str,
        labeled: &[(String, String)],
    ) -> Result<String, JudgeError> {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        // Descending length, ties by label order (stable sort).
        order.sort_by(|&a, &b| labeled[b].1.len().cmp(&labeled[a].1.len()));
        let mut ranks = vec![0u32; labeled.len()];
        for (position, &idx) in order.iter().enumerate() {
            ranks[idx] = position as u32 + 1;
        }
        Ok(ranks
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(","))
    }
}

impl JudgeClient for HttpTextClient {
    fn rank(
        &mut self,
        prompt: &str,
        labeled: &[(String, String)],
    ) -> Result<String, JudgeError> {
        let mut request = format!(
            "Rank the following responses to the prompt from 1 (best) to {} (worst).\n\
             Reply with exactly one line of comma-separated ranks aligned to the response order.\n\n\
             Prompt:\n{prompt}\n",
            labeled.len()
        );
        for (label, response) in labeled {
            request.push_str(&format!("\n{label}:\n{response}\n"));
        }
        Ok(self.complete(&request)?)
    }
}

/// Parse a judge reply strictly: exactly one rank per label, forming a
/// permutation of 1..=k.
fn parse_ranks(reply: &str, expected: usize) -> Result<Vec<u32>, JudgeError> {
    let line = reply.trim();
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != expected {
        return Err(JudgeError::NotAPermutation {
            expected,
            detail: format!("got {} entries in {line:?}", parts.len()),
        });
    }
    let mut ranks = Vec::with_capacity(expected);
    let mut seen = vec![false; expected];
    for part in parts {
        let rank: u32 = part.parse().map_err(|_| JudgeError::NotAPermutation {
            expected,
            detail: format!("non-integer rank {part:?}"),
        })?;
        if rank < 1 || rank as usize > expected {
            return Err(JudgeError::NotAPermutation {
                expected,
                detail: format!("rank {rank} outside 1..={expected}"),
            });
        }
        if seen[rank as usize - 1] {
            return Err(JudgeError::NotAPermutation {
                expected,
                detail: format!("duplicate rank {rank}"),
            });
        }
        seen[rank as usize - 1] = true;
        ranks.push(rank);
    }
    Ok(ranks)
}

/// Ask the judge for a ranking and validate it; a non-permutation reply is
/// a structured error and the sheet is discarded by the caller.
pub fn collect_ranking(
    judge: &mut dyn JudgeClient,
    prompt_id: &str,
    prompt: &str,
    labeled: &[(String, String)],
    mapping: &BTreeMap<String, String>,
) -> Result<RankSheet, JudgeError> {
    let reply = judge.rank(prompt, labeled)?;
    let ranks = parse_ranks(&reply, labeled.len())?;
    Ok(RankSheet {
        prompt_id: prompt_id.to_string(),
        labels: labeled.iter().map(|(l, _)| l.clone()).collect(),
        ranks,
        mapping: mapping.clone(),
    })
}

/// Aggregated counts per model and rank position. Counts are the ground
/// truth; percentages are derived on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTable {
    pub models: Vec<ModelCounts>,
    /// Number of prompts (sheets) aggregated.
    pub n: u64,
    /// Rank positions per sheet (equals the candidate count).
    pub rank_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCounts {
    pub model: String,
    /// `counts[r]` = times this model received rank `r + 1`.
    pub counts: Vec<u64>,
}

impl RankTable {
    /// Build from explicit per-model count rows (fixture path). Every row
    /// must sum to the same prompt count and every rank column must too.
    pub fn from_counts(rows: &[(&str, Vec<u64>)]) -> Result<Self, JudgeError> {
        if rows.is_empty() {
            return Err(JudgeError::BadTable("no rows".into()));
        }
        let rank_count = rows[0].1.len();
        let n: u64 = rows[0].1.iter().sum();
        for (model, counts) in rows {
            if counts.len() != rank_count {
                return Err(JudgeError::BadTable(format!(
                    "{model}: expected {rank_count} rank columns"
                )));
            }
            let sum: u64 = counts.iter().sum();
            if sum != n {
                return Err(JudgeError::BadTable(format!(
                    "{model}: row sums to {sum}, expected {n}"
                )));
            }
        }
        for rank in 0..rank_count {
            let column: u64 = rows.iter().map(|(_, c)| c[rank]).sum();
            if column != n {
                return Err(JudgeError::BadTable(format!(
                    "rank {} column sums to {column}, expected {n}",
                    rank + 1
                )));
            }
        }
        Ok(RankTable {
            models: rows
                .iter()
                .map(|(model, counts)| ModelCounts {
                    model: model.to_string(),
                    counts: counts.clone(),
                })
                .collect(),
            n,
            rank_count,
        })
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        let rows: Vec<(&str, Vec<u64>)> = self
            .models
            .iter()
            .map(|m| (m.model.as_str(), m.counts.clone()))
            .collect();
        let rebuilt = RankTable::from_counts(&rows)?;
        if rebuilt.n != self.n || rebuilt.rank_count != self.rank_count {
            return Err(JudgeError::BadTable(format!(
                "metadata disagrees with counts: n {} vs {}, ranks {} vs {}",
                self.n, rebuilt.n, self.rank_count, rebuilt.rank_count
            )));
        }
        Ok(())
    }

    /// Percentage of prompts where `model` took `rank` (1-based), in basis
    /// points rounded half-up. Integer arithmetic, no float drift.
    pub fn percent_basis_points(&self, model_index: usize, rank: usize) -> u64 {
        let count = self.models[model_index].counts[rank - 1];
        (20_000 * count + self.n) / (2 * self.n)
    }

    /// Render one percentage cell: half-up to 2 decimals, trailing zeros
    /// trimmed (`65.78%`, `24%`, `9.3%`, `0%`).
    pub fn percent_cell(&self, model_index: usize, rank: usize) -> String {
        let bp = self.percent_basis_points(model_index, rank);
        let whole = bp / 100;
        let frac = bp % 100;
        if frac == 0 {
            format!("{whole}%")
        } else if frac % 10 == 0 {
            format!("{whole}.{}%", frac / 10)
        } else {
            format!("{whole}.{frac:02}%")
        }
    }
}

/// Fold validated sheets into a table. Every sheet must cover the same
/// model set; the result is invariant to sheet order.
pub fn aggregate(sheets: &[RankSheet]) -> Result<RankTable, JudgeError> {
    if sheets.is_empty() {
        return Err(JudgeError::NoSheets);
    }
    let first: Vec<String> = {
        let mut models: Vec<String> = sheets[0].mapping.values().cloned().collect();
        models.sort();
        models
    };
    let rank_count = first.len();
    let mut counts: BTreeMap<String, Vec<u64>> = first
        .iter()
        .map(|m| (m.clone(), vec![0u64; rank_count]))
        .collect();
    for sheet in sheets {
        let ranks = sheet.model_ranks();
        let mut models: Vec<String> = ranks.keys().cloned().collect();
        models.sort();
        if models != first {
            return Err(JudgeError::InconsistentModels {
                prompt_id: sheet.prompt_id.clone(),
            });
        }
        for (model, rank) in ranks {
            counts.get_mut(&model).expect("checked")[rank as usize - 1] += 1;
        }
    }
    Ok(RankTable {
        models: counts
            .into_iter()
            .map(|(model, counts)| ModelCounts { model, counts })
            .collect(),
        n: sheets.len() as u64,
        rank_count,
    })
}

fn ordinal(rank: usize) -> String {
    let suffix = match (rank % 10, rank % 100) {
        (1, 11) | (2, 12) | (3, 13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{rank}{suffix}")
}

/// Fixed-width text grid: header `Model/Rank | 1st | 2nd | ...`, one row
/// per model, cells rendered by [`RankTable::percent_cell`].
pub fn render_table(table: &RankTable) -> String {
    let mut header: Vec<String> = vec!["Model/Rank".to_string()];
    for rank in 1..=table.rank_count {
        header.push(ordinal(rank));
    }
    let mut rows: Vec<Vec<String>> = vec![header];
    for (i, model) in table.models.iter().enumerate() {
        let mut row = vec![model.model.clone()];
        for rank in 1..=table.rank_count {
            row.push(table.percent_cell(i, rank));
        }
        rows.push(row);
    }
    // Only the name column is padded; rank cells stay compact so the
    // header reads exactly `Model/Rank | 1st | 2nd | ...`.
    let name_width = rows.iter().map(|r| r[0].len()).max().unwrap_or(0);
    let mut out = String::new();
    for row in &rows {
        let mut line = format!("{:<name_width$}", row[0]);
        for cell in &row[1..] {
            line.push_str(" | ");
            line.push_str(cell);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

// --- JSONL persistence: sheets and mappings in separate files ------------

#[derive(Serialize, Deserialize)]
struct SheetRow {
    #[serde(rename = "promptId")]
    prompt_id: String,
    labels: Vec<String>,
    ranks: Vec<u32>,
    #[serde(rename = "mappingRef")]
    mapping_ref: String,
}

#[derive(Serialize, Deserialize)]
struct MappingRow {
    #[serde(rename = "promptId")]
    prompt_id: String,
    mapping: BTreeMap<String, String>,
}

/// Persist sheets as JSONL with the label->model mappings in a separate
/// file so the ranking record stays blind on its own.
pub fn write_sheets(
    sheets: &[RankSheet],
    sheets_path: &Path,
    mapping_path: &Path,
) -> Result<(), JudgeError> {
    let mapping_ref = mapping_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| mapping_path.display().to_string());
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| JudgeError::Io {
            path: path.clone(),
            source,
        }
    };
    let mut sheet_buf = String::new();
    let mut map_buf = String::new();
    for sheet in sheets {
        let row = SheetRow {
            prompt_id: sheet.prompt_id.clone(),
            labels: sheet.labels.clone(),
            ranks: sheet.ranks.clone(),
            mapping_ref: mapping_ref.clone(),
        };
        sheet_buf.push_str(&serde_json::to_string(&row).expect("serializable"));
        sheet_buf.push('\n');
        let row = MappingRow {
            prompt_id: sheet.prompt_id.clone(),
            mapping: sheet.mapping.clone(),
        };
        map_buf.push_str(&serde_json::to_string(&row).expect("serializable"));
        map_buf.push('\n');
    }
    fs::write(sheets_path, sheet_buf).map_err(io(sheets_path))?;
    fs::write(mapping_path, map_buf).map_err(io(mapping_path))?;
    Ok(())
}

/// Load sheets and rejoin them with their mappings.
pub fn read_sheets(sheets_path: &Path, mapping_path: &Path) -> Result<Vec<RankSheet>, JudgeError> {
    let parse_lines = |path: &Path| -> Result<Vec<String>, JudgeError> {
        let text = fs::read_to_string(path).map_err(|source| JudgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(text.lines().map(str::to_string).collect())
    };
    let mut mappings: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (idx, line) in parse_lines(mapping_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MappingRow =
            serde_json::from_str(line).map_err(|e| JudgeError::Line {
                path: mapping_path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        mappings.insert(row.prompt_id, row.mapping);
    }
    let mut sheets = Vec::new();
    for (idx, line) in parse_lines(sheets_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: SheetRow = serde_json::from_str(line).map_err(|e| JudgeError::Line {
            path: sheets_path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let mapping = mappings
            .get(&row.prompt_id)
            .ok_or_else(|| JudgeError::MissingMapping {
                prompt_id: row.prompt_id.clone(),
            })?
            .clone();
        sheets.push(RankSheet {
            prompt_id: row.prompt_id,
            labels: row.labels,
            ranks: row.ranks,
            mapping,
        });
    }
    Ok(sheets)
}
