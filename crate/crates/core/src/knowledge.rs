//! Error database and document retrieval.
//!
//! The database maps an error code to a description, root reason and
//! suggested solution. A document RAG for a message is the list of database
//! rows for the codes the message mentions, in order of first mention.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_DB: &str = include_str!("../../../data/error_db.jsonl");

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: field `{field}` is empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: duplicate error id `{id}`")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub error_id: String,
    pub description: String,
    pub root_reason: String,
    pub solution: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ErrorDb {
    records: BTreeMap<String, ErrorRecord>,
}

impl ErrorDb {
    /// The database shipped in `data/error_db.jsonl`.
    pub fn shipped() -> Self {
        Self::parse(DEFAULT_DB).expect("shipped error database is valid")
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let mut records = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ErrorRecord =
                serde_json::from_str(line).map_err(|source| KnowledgeError::Parse {
                    line: line_no,
                    source,
                })?;
            for (field, value) in [
                ("error_id", &rec.error_id),
                ("description", &rec.description),
                ("root_reason", &rec.root_reason),
                ("solution", &rec.solution),
            ] {
                if value.trim().is_empty() {
                    return Err(KnowledgeError::EmptyField {
                        line: line_no,
                        field,
                    });
                }
            }
            if records.contains_key(&rec.error_id) {
                return Err(KnowledgeError::DuplicateId {
                    line: line_no,
                    id: rec.error_id,
                });
            }
            records.insert(rec.error_id.clone(), rec);
        }
        Ok(ErrorDb { records })
    }

    pub fn get(&self, id: &str) -> Option<&ErrorRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ErrorRecord> {
        self.records.values()
    }
}

/// Document retrieval result for one message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRag {
    pub entries: Vec<ErrorRecord>,
    /// Codes found in the message that the database does not know.
    pub unknown_codes: Vec<String>,
}

impl DocRag {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.unknown_codes.is_empty()
    }
}

fn code_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z]-error-[0-9]+").expect("valid pattern"))
}

/// Error codes mentioned in `message`, first occurrence order, no repeats.
pub fn parse_error_codes(message: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    code_pattern()
        .find_iter(message)
        .map(|m| m.as_str())
        .filter(|code| seen.insert(*code))
        .map(str::to_string)
        .collect()
}

pub fn build_doc_rag(message: &str, db: &ErrorDb) -> DocRag {
    let mut rag = DocRag::default();
    for code in parse_error_codes(message) {
        match db.get(&code) {
            Some(rec) => rag.entries.push(rec.clone()),
            None => rag.unknown_codes.push(code),
        }
    }
    rag
}
