//! Core record types and streaming JSON-Lines input/output.
//!
//! Records are stored one JSON object per line, UTF-8, with the canonical
//! key order given by each struct's field declaration order. Readers are
//! streaming: memory is bounded by the largest single record, not by file
//! size.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("manifest mismatch for {name}: manifest says {expected} samples, file has {actual}")]
    ManifestMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
}

/// One aligned source/target sentence pair with document provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelPair {
    pub id: String,
    pub doc_id: String,
    pub seq_index: u64,
    pub source_lang: String,
    pub target_lang: String,
    pub source_text: String,
    pub target_text: String,
    pub provenance: String,
}

impl ParallelPair {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.source_lang == self.target_lang {
            return Err(ModelError::Invariant(format!(
                "pair {}: source_lang equals target_lang ({})",
                self.id, self.source_lang
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::System => write!(f, "system"),
            Role::User => write!(f, "user"),
            Role::Assistant => write!(f, "assistant"),
        }
    }
}

/// One role-tagged message; `reasoning` is only present on assistant turns
/// that carry a thinking trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reasoning: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
            reasoning: None,
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
            reasoning: None,
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
            reasoning: None,
        }
    }
}

/// On-policy data comes from the unmodified base model; off-policy data from
/// external corpora or other teachers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningMode {
    On,
    Off,
    NotApplicable,
}

/// An ordered chat conversation with policy and reasoning tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub dataset: String,
    pub messages: Vec<Message>,
    pub policy: Policy,
    pub reasoning_mode: ReasoningMode,
}

impl Conversation {
    /// Checks message-structure invariants: non-empty, at most one leading
    /// system message, then strict user/assistant alternation starting with
    /// user, reasoning only on assistant turns.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.messages.is_empty() {
            return Err(ModelError::Invariant(format!(
                "conversation {}: empty message list",
                self.id
            )));
        }
        let mut rest = &self.messages[..];
        if rest[0].role == Role::System {
            rest = &rest[1..];
        }
        for (i, msg) in rest.iter().enumerate() {
            let expect = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if msg.role != expect {
                return Err(ModelError::Invariant(format!(
                    "conversation {}: expected {} at turn {}, found {}",
                    self.id, expect, i, msg.role
                )));
            }
        }
        for msg in &self.messages {
            if msg.reasoning.is_some() && msg.role != Role::Assistant {
                return Err(ModelError::Invariant(format!(
                    "conversation {}: reasoning on non-assistant turn",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Per-dataset accounting entry: one row of the mixture table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: PathBuf,
    pub sample_count: u64,
    pub token_count: u64,
    pub mean_seq_len: f64,
    pub policy: Policy,
}

/// Pluggable token counter. The bundled reference counter splits on Unicode
/// whitespace; a real tokenizer can be substituted behind this trait.
pub trait TokenCounter: Send + Sync {
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> u64;
}

/// Reference counter: a maximal run of non-whitespace characters is one
/// token. Deterministic and dependency-free; absolute counts from a real
/// subword tokenizer are not reproduced, only relative accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn name(&self) -> &str {
        "whitespace"
    }
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

/// Total tokens in a conversation: content plus reasoning of every message.
pub fn conversation_tokens(conv: &Conversation, counter: &dyn TokenCounter) -> u64 {
    conv.messages
        .iter()
        .map(|m| {
            counter.count(&m.content)
                + m.reasoning.as_deref().map_or(0, |r| counter.count(r))
        })
        .sum()
}

/// Streaming JSONL reader. Yields records in file order; holds one line in
/// memory at a time.
pub struct JsonlReader<T> {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    line_no: usize,
    _marker: PhantomData<T>,
}

impl<T: DeserializeOwned> JsonlReader<T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|source| ModelError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(JsonlReader {
            lines: BufReader::new(file).lines(),
            path,
            line_no: 0,
        _marker: PhantomData,
        })
    }
}

impl<T: DeserializeOwned> Iterator for JsonlReader<T> {
    type Item = Result<T, ModelError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(ModelError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(|e| classify_parse_error(e, self.line_no)));
        }
    }
}

fn classify_parse_error(e: serde_json::Error, line: usize) -> ModelError {
    let msg = e.to_string();
    if let Some(field) = msg.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
        ModelError::MissingField {
            line,
            field: field.to_string(),
        }
    } else {
        ModelError::Malformed { line, msg }
    }
}

/// Convenience: read a whole file into memory (small fixtures and reports).
pub fn read_all<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, ModelError> {
    JsonlReader::open(path)?.collect()
}

/// JSONL writer with canonical (struct declaration order) keys.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl JsonlWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
        })
    }
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), ModelError> {
        let line = serde_json::to_string(record).map_err(|e| ModelError::Malformed {
            line: 0,
            msg: e.to_string(),
        })?;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|source| ModelError::Io {
                path: PathBuf::new(),
                source,
            })
    }

    pub fn finish(mut self) -> Result<(), ModelError> {
        self.out.flush().map_err(|source| ModelError::Io {
            path: PathBuf::new(),
            source,
        })
    }
}

/// Recounts the records at `manifest.path` and errors when the manifest's
/// sample_count disagrees.
pub fn validate_manifest(manifest: &DatasetManifest) -> Result<(), ModelError> {
    let actual = JsonlReader::<serde_json::Value>::open(&manifest.path)?
        .collect::<Result<Vec<_>, _>>()?
        .len() as u64;
    if actual != manifest.sample_count {
        return Err(ModelError::ManifestMismatch {
            name: manifest.name.clone(),
            expected: manifest.sample_count,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str) -> ParallelPair {
        ParallelPair {
            id: id.to_string(),
            doc_id: "d1".to_string(),
            seq_index: 0,
            source_lang: "en".to_string(),
            target_lang: "cy".to_string(),
            source_text: "hello".to_string(),
            target_text: "helo".to_string(),
            provenance: "test".to_string(),
        }
    }

    #[test]
    fn reads_three_records_in_order() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for id in ["a", "b", "c"] {
            writeln!(f, "{}", serde_json::to_string(&pair(id)).unwrap()).unwrap();
        }
        let got: Vec<ParallelPair> = read_all(f.path()).unwrap();
        let ids: Vec<_> = got.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::to_string(&pair("a")).unwrap()).unwrap();
        writeln!(f, "{{\"doc_id\":\"d\",\"seq_index\":0,\"source_lang\":\"en\",\"target_lang\":\"cy\",\"source_text\":\"x\",\"target_text\":\"y\",\"provenance\":\"p\"}}").unwrap();
        let err = read_all::<ParallelPair>(f.path()).unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field id");
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let got: Vec<ParallelPair> = read_all(f.path()).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn whitespace_counter_basics() {
        let c = WhitespaceCounter;
        assert_eq!(c.count(""), 0);
        assert_eq!(c.count("hello world"), 2);
        assert_eq!(c.count("  a\tb\nc  "), 3);
    }

    #[test]
    fn conversation_alternation_enforced() {
        let mut conv = Conversation {
            id: "c1".to_string(),
            dataset: "t".to_string(),
            messages: vec![
                Message::system("s"),
                Message::user("u"),
                Message::assistant("a"),
            ],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        };
        conv.validate().unwrap();
        conv.messages.push(Message::assistant("again"));
        assert!(conv.validate().is_err());
    }

    #[test]
    fn reasoning_only_on_assistant() {
        let conv = Conversation {
            id: "c2".to_string(),
            dataset: "t".to_string(),
            messages: vec![Message {
                role: Role::User,
                content: "u".to_string(),
                reasoning: Some("sneaky".to_string()),
            }],
            policy: Policy::Off,
            reasoning_mode: ReasoningMode::NotApplicable,
        };
        assert!(conv.validate().is_err());
    }

    #[test]
    fn manifest_recount_detects_mismatch() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", serde_json::to_string(&pair("a")).unwrap()).unwrap();
        let manifest = DatasetManifest {
            name: "t".to_string(),
            path: f.path().to_path_buf(),
            sample_count: 2,
            token_count: 0,
            mean_seq_len: 0.0,
            policy: Policy::Off,
        };
        assert!(matches!(
            validate_manifest(&manifest),
            Err(ModelError::ManifestMismatch { .. })
        ));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut buf = Vec::new();
        {
            let mut w = JsonlWriter::new(&mut buf);
            for id in ["x", "y"] {
                w.write(&pair(id)).unwrap();
            }
            w.finish().unwrap();
        }
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(&buf).unwrap();
        let records: Vec<ParallelPair> = read_all(f.path()).unwrap();
        let mut buf2 = Vec::new();
        {
            let mut w = JsonlWriter::new(&mut buf2);
            for r in &records {
                w.write(r).unwrap();
            }
            w.finish().unwrap();
        }
        assert_eq!(buf, buf2);
    }
}
