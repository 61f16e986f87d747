//! Corpus records and the JSONL container shared by every pipeline stage.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("empty command on line {0}")]
    EmptyCommand(usize),
}

/// Class label attached to a corpus record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Obfuscated,
}

/// Analyst triage category for a reviewed detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ObfuscatedMalicious,
    ObfuscatedBenign,
    NonObfuscated,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::ObfuscatedMalicious,
        Category::ObfuscatedBenign,
        Category::NonObfuscated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::ObfuscatedMalicious => "obfuscated_malicious",
            Category::ObfuscatedBenign => "obfuscated_benign",
            Category::NonObfuscated => "non_obfuscated",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }
}

/// One raw command line plus source metadata and an optional label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionLog {
    pub raw: String,
    pub source_id: String,
    pub label: Option<Label>,
    pub technique: Option<String>,
}

impl ExecutionLog {
    pub fn benign(raw: impl Into<String>, source_id: impl Into<String>) -> Self {
        ExecutionLog {
            raw: raw.into(),
            source_id: source_id.into(),
            label: Some(Label::Benign),
            technique: None,
        }
    }

    pub fn obfuscated(
        raw: impl Into<String>,
        source_id: impl Into<String>,
        technique: impl Into<String>,
    ) -> Self {
        ExecutionLog {
            raw: raw.into(),
            source_id: source_id.into(),
            label: Some(Label::Obfuscated),
            technique: Some(technique.into()),
        }
    }
}

/// One JSONL line of a corpus file. Unknown fields are preserved on rewrite.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusRecord {
    pub raw: String,
    pub source_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub technique: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl CorpusRecord {
    pub fn new(raw: impl Into<String>, source_id: impl Into<String>) -> Self {
        CorpusRecord {
            raw: raw.into(),
            source_id: source_id.into(),
            label: None,
            technique: None,
            split: None,
            extra: serde_json::Map::new(),
        }
    }

    pub fn to_log(&self) -> ExecutionLog {
        ExecutionLog {
            raw: self.raw.clone(),
            source_id: self.source_id.clone(),
            label: self.label,
            technique: self.technique.clone(),
        }
    }

    pub fn from_log(log: &ExecutionLog) -> Self {
        CorpusRecord {
            raw: log.raw.clone(),
            source_id: log.source_id.clone(),
            label: log.label,
            technique: log.technique.clone(),
            split: None,
            extra: serde_json::Map::new(),
        }
    }
}

/// Reads a JSONL corpus, one record per non-empty line.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Parse {
                line: idx + 1,
                source,
            }
        })?;
        if record.raw.trim().is_empty() {
            return Err(CorpusError::EmptyCommand(idx + 1));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<W: Write>(writer: &mut W, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    for record in records {
        serde_json::to_writer(&mut *writer, record).map_err(|e| CorpusError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_unknown_fields() {
        let line = r#"{"raw":"cmd.exe /c dir","source_id":"s1","label":"benign","vendor_tag":"x"}"#;
        let records = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].label, Some(Label::Benign));
        assert_eq!(records[0].extra["vendor_tag"], "x");
        let mut out = Vec::new();
        write_jsonl(&mut out, &records).unwrap();
        let again = read_jsonl(out.as_slice()).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn empty_raw_rejected() {
        let line = r#"{"raw":"   ","source_id":"s1"}"#;
        assert!(matches!(
            read_jsonl(line.as_bytes()),
            Err(CorpusError::EmptyCommand(1))
        ));
    }

    #[test]
    fn bad_json_reports_line() {
        let data = "{\"raw\":\"a\",\"source_id\":\"s\"}\nnot json\n";
        match read_jsonl(data.as_bytes()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
