//! JSONL persistence: one JSON object per line, strict field checking.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CorpusError, Validate};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write records as JSONL. Field order follows the record definition, so
/// output is byte-stable for identical inputs.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut buf = String::new();
    for record in records {
        buf.push_str(&serde_json::to_string(record).expect("records serialize infallibly"));
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

/// Read and validate JSONL records. Unknown fields, unknown enum values,
/// and invariant violations all fail with the offending line number.
pub fn read_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| CorpusError::Line {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{sample_eval, sample_qgen};
    use crate::corpus::{EvalRecord, QGenRecord};

    #[test]
    fn roundtrip_many_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let records: Vec<QGenRecord> = (0..50)
            .map(|i| {
                let mut r = sample_qgen();
                r.id = format!("r{i}");
                r
            })
            .collect();
        write_jsonl(&records, &path).unwrap();
        let back: Vec<QGenRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn unknown_enum_value_fails_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let good = serde_json::to_string(&sample_eval()).unwrap();
        let bad = good.replace("\"Average\"", "\"Excellent\"");
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        let err = read_jsonl::<EvalRecord>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("line 2:"), "{msg}");
        assert!(msg.contains("Excellent"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let mut value = serde_json::to_value(sample_qgen()).unwrap();
        value["difficulty"] = serde_json::json!("hard");
        fs::write(&path, format!("{value}\n")).unwrap();
        let err = read_jsonl::<QGenRecord>(&path).unwrap_err();
        assert!(err.to_string().contains("difficulty"), "{err}");
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.jsonl");
        let good = serde_json::to_string(&sample_qgen()).unwrap();
        fs::write(&path, format!("{good}\n{good}\nnot json\n")).unwrap();
        let err = read_jsonl::<QGenRecord>(&path).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn out_of_range_score_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let bad = serde_json::to_string(&sample_eval())
            .unwrap()
            .replace("\"grammarScore\":8", "\"grammarScore\":11");
        fs::write(&path, format!("{bad}\n")).unwrap();
        let err = read_jsonl::<EvalRecord>(&path).unwrap_err();
        assert!(err.to_string().contains("grammarScore"), "{err}");
    }

    #[test]
    fn empty_file_yields_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let records: Vec<QGenRecord> = read_jsonl(&path).unwrap();
        assert!(records.is_empty());
    }
}
