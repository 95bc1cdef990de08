//! Mini-HDL: the language, its checker, and reverse-engineering data
//! generation.
//!
//! Grammar (whitespace and `//`, `/* */` comments are free-form):
//!
//! ```text
//! file   := "module" IDENT "(" [port ("," port)*] ")" ";" item* "endmodule"
//! port   := ("input" | "output") IDENT
//! item   := ("wire" | "reg" | "clock" | "probe") IDENT ";"
//!         | "assign" IDENT "=" expr ";"
//!         | "pulse" IDENT ";"
//!         | "init" IDENT "=" NUMBER ";"
//! expr   := operand (("&" | "|" | "^" | "+" | "-" | "*") operand)*
//! operand:= IDENT | NUMBER | "(" expr ")" | ("~" | "!" | "-") operand
//! ```
//!
//! Checker rules:
//!
//! | code       | rule                                                      |
//! |------------|-----------------------------------------------------------|
//! | S-error-1  | statement or header does not follow the grammar           |
//! | T-error-2  | a clock name declared twice                               |
//! | T-error-4  | `init` of a probe with value 0                            |
//! | T-error-18 | `assign` placed before the last declaration               |
//! | T-error-27 | `pulse` of an undeclared name                             |
//! | C-error-1  | undeclared name used in `assign`/`init`, or redeclared    |
//! | C-error-2  | `assign` driving an input port                            |
//! | P-error-8  | wire or output port never driven by an `assign`           |

mod check;
mod dataset;
mod mutate;
mod token;

use std::path::PathBuf;

use thiserror::Error;

pub use check::{check, format_message, Diagnostic, Rule};
pub use dataset::{
    generate_dataset, load_seeds, read_jsonl, write_jsonl, CodeInstance, GenerationReport,
};
pub use mutate::{mutate, revert, MutationOp, MutationRecord, Span};
pub use token::{
    detokenize, significant_texts, tokenize, tokenize_bytes, Token, TokenKind, KEYWORDS,
};

#[derive(Debug, Error)]
pub enum MiniHdlError {
    #[error("input is not valid UTF-8 (valid up to byte {valid_up_to})")]
    Encoding { valid_up_to: usize },
    #[error("{op} is not applicable to {path}")]
    NotApplicable { op: MutationOp, path: String },
    #[error("mutation record does not match the mutant at bytes {start}..{end}")]
    CorruptRecord { start: usize, end: usize },
    #[error("unknown mutation op `{0}`")]
    UnknownOp(String),
    #[error("seed {path} fails the checker:\n{message}")]
    RejectedSeed { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A source file. `path` is the key used for deterministic site selection,
/// so it should be stable across machines (the file name, not an absolute
/// path).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: String,
    pub text: String,
}

impl SourceFile {
    pub fn new(path: impl Into<String>, text: impl Into<String>) -> Self {
        SourceFile {
            path: path.into(),
            text: text.into(),
        }
    }

    pub fn from_bytes(path: impl Into<String>, bytes: Vec<u8>) -> Result<Self, MiniHdlError> {
        let text = String::from_utf8(bytes).map_err(|e| MiniHdlError::Encoding {
            valid_up_to: e.utf8_error().valid_up_to(),
        })?;
        Ok(SourceFile::new(path, text))
    }

    pub fn stem(&self) -> &str {
        let name = self.path.rsplit('/').next().unwrap_or(&self.path);
        name.strip_suffix(".mhdl").unwrap_or(name)
    }
}
