//! Line-delimited JSON record files (one object per line, UTF-8).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{As2Record, EvalTuple, MrDocument};
use crate::harness::{ReferenceRecord, RunRecord};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Malformed { path: String, line: usize, field: String, message: String },
    #[error("unknown record format {0:?}")]
    UnknownFormat(String),
}

impl RecordError {
    pub fn line(&self) -> Option<usize> {
        match self {
            RecordError::Malformed { line, .. } => Some(*line),
            _ => None,
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            RecordError::Malformed { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordFormat {
    MrDocument,
    As2,
    AvaTuple,
    SystemRun,
    Reference,
}

impl FromStr for RecordFormat {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mr-document" => Ok(Self::MrDocument),
            "as2" => Ok(Self::As2),
            "ava-tuple" => Ok(Self::AvaTuple),
            "system-run" => Ok(Self::SystemRun),
            "reference" => Ok(Self::Reference),
            other => Err(RecordError::UnknownFormat(other.to_string())),
        }
    }
}

/// Records of any supported format.
#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    MrDocument(Vec<MrDocument>),
    As2(Vec<As2Record>),
    AvaTuple(Vec<EvalTuple>),
    SystemRun(Vec<RunRecord>),
    Reference(Vec<ReferenceRecord>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::MrDocument(v) => v.len(),
            Records::As2(v) => v.len(),
            Records::AvaTuple(v) => v.len(),
            Records::SystemRun(v) => v.len(),
            Records::Reference(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn read_corpus(path: &Path, format: RecordFormat) -> Result<Records, RecordError> {
    Ok(match format {
        RecordFormat::MrDocument => Records::MrDocument(read_records(path)?),
        RecordFormat::As2 => Records::As2(read_records(path)?),
        RecordFormat::AvaTuple => Records::AvaTuple(read_records(path)?),
        RecordFormat::SystemRun => Records::SystemRun(read_records(path)?),
        RecordFormat::Reference => Records::Reference(read_records(path)?),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RecordError + '_ {
    move |source| RecordError::Io { path: path.display().to_string(), source }
}

/// Parses one record per non-blank line. Errors carry the 1-based line
/// number and the offending field.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_lines(BufReader::new(file), &path.display().to_string())
}

pub fn parse_lines<T: DeserializeOwned>(reader: impl BufRead, source_name: &str) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| RecordError::Io { path: source_name.to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        match serde_path_to_error::deserialize::<_, T>(de) {
            Ok(rec) => out.push(rec),
            Err(err) => {
                let path = err.path().to_string();
                let inner = err.into_inner();
                let message = inner.to_string();
                let field = missing_field(&message).map(str::to_string).unwrap_or(path);
                return Err(RecordError::Malformed { path: source_name.to_string(), line: i + 1, field, message });
            }
        }
    }
    Ok(out)
}

fn missing_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("missing field `")?;
    rest.split('`').next()
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RecordError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec).map_err(|e| RecordError::Io { path: path.display().to_string(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuple(i: usize) -> EvalTuple {
        EvalTuple {
            qid: format!("q{i}"),
            question: "What is the capital?".into(),
            reference: "Paris is the capital.".into(),
            short_answer: (i % 2 == 0).then(|| "Paris".into()),
            candidate: format!("candidate {i}"),
            label: (i % 2) as u8,
        }
    }

    #[test]
    fn eval_tuples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuples.jsonl");
        let tuples: Vec<EvalTuple> = (0..3).map(tuple).collect();
        write_records(&path, &tuples).unwrap();
        let back: Vec<EvalTuple> = read_records(&path).unwrap();
        assert_eq!(back, tuples);
        assert_eq!(read_corpus(&path, RecordFormat::AvaTuple).unwrap(), Records::AvaTuple(tuples));
    }

    #[test]
    fn missing_label_reports_line_and_field() {
        let text = concat!(
            r#"{"qid":"a","question":"q","reference":"r","candidate":"t","label":1}"#,
            "\n",
            r#"{"qid":"b","question":"q","reference":"r","candidate":"t"}"#,
            "\n"
        );
        let err = parse_lines::<EvalTuple>(text.as_bytes(), "mem").unwrap_err();
        assert_eq!(err.line(), Some(2));
        assert_eq!(err.field(), Some("label"));
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn wrong_type_names_field() {
        let text = r#"{"qid":"a","question":"q","reference":"r","candidate":"t","label":"yes"}"#;
        let err = parse_lines::<EvalTuple>(text.as_bytes(), "mem").unwrap_err();
        assert_eq!(err.line(), Some(1));
        assert_eq!(err.field(), Some("label"));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let recs: Vec<MrDocument> = read_records(&path).unwrap();
        assert!(recs.is_empty());
    }

    #[test]
    fn format_names() {
        assert_eq!("mr-document".parse::<RecordFormat>().unwrap(), RecordFormat::MrDocument);
        assert!("csv".parse::<RecordFormat>().is_err());
    }
}
