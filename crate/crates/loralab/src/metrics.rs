//! Append-only JSONL emission: one self-describing record per line. A
//! truncated file is detectable because its last line fails to parse; every
//! complete line stays valid forever.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Write all records, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Append one record as a single write of `line + \n`.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(line.as_bytes())?;
    Ok(())
}

/// Read every record back. A malformed final line is reported as
/// truncation; a malformed interior line as corruption. Either way the
/// error names the line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) => {
                let kind = if i + 1 == lines.len() { "truncated" } else { "corrupt" };
                return Err(Error::InvalidInput(format!(
                    "{}: {kind} record on line {}: {e}",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::MetricsRecord;
    use std::fs;

    fn record(step: usize) -> MetricsRecord {
        MetricsRecord {
            step,
            train_loss: 1.25 - step as f64 * 0.1,
            val_accuracy: 0.5,
            trainable_param_count: 100,
            wall_ms: 7,
            method: "loratrf".into(),
            rank: 4,
            placement: "W_o/r4/filters=0@layer_output/per_layer/rT8".into(),
            seed: 3,
        }
    }

    #[test]
    fn round_trip_preserves_records_and_drops_walltime() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_jsonl(&path, &[record(1), record(2)]).unwrap();
        append_jsonl(&path, &record(3)).unwrap();
        let back: Vec<MetricsRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2].step, 3);
        assert_eq!(back[0].train_loss, record(1).train_loss);
        // wall_ms is measured, not persisted.
        assert_eq!(back[0].wall_ms, 0);
        assert!(!fs::read_to_string(&path).unwrap().contains("wall_ms"));
    }

    #[test]
    fn truncated_final_line_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_jsonl(&path, &[record(1), record(2)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 20]).unwrap();
        let err = read_jsonl::<MetricsRecord>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn interior_corruption_is_distinguished_from_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_jsonl(&path, &[record(1), record(2)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mangled = text.replacen("\"step\":1", "\"step\":oops", 1);
        fs::write(&path, mangled).unwrap();
        let err = read_jsonl::<MetricsRecord>(&path).unwrap_err().to_string();
        assert!(err.contains("corrupt"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn identical_records_serialize_identically() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_jsonl(&a, &[record(1), record(2)]).unwrap();
        write_jsonl(&b, &[record(1), record(2)]).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
