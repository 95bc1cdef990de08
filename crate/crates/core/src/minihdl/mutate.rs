use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::check::{parse, DeclKind, Item, Parsed, PortDir, Rule};
use super::token::TokenKind;
use super::{MiniHdlError, SourceFile};

/// The shipped modification functions. Each one injects exactly one fault
/// class into a correct design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    DropSemicolon,
    DuplicateClockDecl,
    ProbeInitZero,
    StrayAssignment,
    PulseUndeclared,
    RenameIdentifierUse,
    DemoteTopOutput,
    DeleteAssignment,
}

impl MutationOp {
    pub const ALL: [MutationOp; 8] = [
        MutationOp::DropSemicolon,
        MutationOp::DuplicateClockDecl,
        MutationOp::ProbeInitZero,
        MutationOp::StrayAssignment,
        MutationOp::PulseUndeclared,
        MutationOp::RenameIdentifierUse,
        MutationOp::DemoteTopOutput,
        MutationOp::DeleteAssignment,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MutationOp::DropSemicolon => "drop_semicolon",
            MutationOp::DuplicateClockDecl => "duplicate_clock_decl",
            MutationOp::ProbeInitZero => "probe_init_zero",
            MutationOp::StrayAssignment => "stray_assignment",
            MutationOp::PulseUndeclared => "pulse_undeclared",
            MutationOp::RenameIdentifierUse => "rename_identifier_use",
            MutationOp::DemoteTopOutput => "demote_top_output",
            MutationOp::DeleteAssignment => "delete_assignment",
        }
    }

    pub fn rule(self) -> Rule {
        match self {
            MutationOp::DropSemicolon => Rule::Syntax,
            MutationOp::DuplicateClockDecl => Rule::DuplicateClock,
            MutationOp::ProbeInitZero => Rule::ProbeInitZero,
            MutationOp::StrayAssignment => Rule::StrayAssignment,
            MutationOp::PulseUndeclared => Rule::PulseUndeclared,
            MutationOp::RenameIdentifierUse => Rule::UndeclaredUse,
            MutationOp::DemoteTopOutput => Rule::InputDriven,
            MutationOp::DeleteAssignment => Rule::Undriven,
        }
    }

    /// The diagnostic code this op is designed to trigger.
    pub fn error_code(self) -> &'static str {
        self.rule().code()
    }

    pub fn applicability(self) -> &'static str {
        match self {
            MutationOp::DropSemicolon => "any declaration or statement in the module body",
            MutationOp::DuplicateClockDecl => "a `clock` declaration",
            MutationOp::ProbeInitZero => "an `init` of a probe with a non-zero value",
            MutationOp::StrayAssignment => "an `assign` statement and at least one declaration",
            MutationOp::PulseUndeclared => "an `endmodule` keyword",
            MutationOp::RenameIdentifierUse => {
                "an identifier on the right-hand side of an `assign`"
            }
            MutationOp::DemoteTopOutput => "an `output` port that is assigned",
            MutationOp::DeleteAssignment => "the only `assign` driving a wire or output port",
        }
    }
}

impl fmt::Display for MutationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MutationOp {
    type Err = MiniHdlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MutationOp::ALL
            .into_iter()
            .find(|op| op.id() == s)
            .ok_or_else(|| MiniHdlError::UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub op_id: MutationOp,
    /// Byte span in the original source that was replaced.
    pub site: Span,
    pub original_text: String,
    pub replacement_text: String,
    pub rng_seed: u64,
}

impl MutationRecord {
    /// Span the replacement occupies in the mutant.
    pub fn mutant_span(&self) -> Span {
        Span {
            start: self.site.start,
            end: self.site.start + self.replacement_text.len(),
        }
    }
}

#[derive(Debug)]
struct Edit {
    start: usize,
    end: usize,
    replacement: String,
}

/// PRNG stream for one `(rng_seed, seed path, op)` task.
fn site_rng(rng_seed: u64, path: &str, op: MutationOp) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(rng_seed.to_le_bytes());
    hasher.update(path.as_bytes());
    hasher.update([0u8]);
    hasher.update(op.id().as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn line_start(text: &str, offset: usize) -> usize {
    text[..offset].rfind('\n').map_or(0, |i| i + 1)
}

fn line_end_inclusive(text: &str, offset: usize) -> usize {
    text[offset..]
        .find('\n')
        .map_or(text.len(), |i| offset + i + 1)
}

fn indent_of(text: &str, offset: usize) -> &str {
    let start = line_start(text, offset);
    let line = &text[start..];
    let n = line.len() - line.trim_start_matches([' ', '\t']).len();
    &line[..n]
}

/// An identifier not yet present in `text`, derived from `base`.
fn fresh_ident(parsed: &Parsed<'_>, base: &str, rng: &mut ChaCha8Rng) -> String {
    let used: BTreeSet<&str> = parsed
        .toks
        .iter()
        .filter(|t| t.kind == TokenKind::Identifier)
        .map(|t| t.text)
        .collect();
    let mut n: u32 = rng.random_range(0..1000);
    loop {
        let name = format!("{base}_{n}");
        if !used.contains(name.as_str()) {
            return name;
        }
        n += 1;
    }
}

fn candidate_edits(
    text: &str,
    parsed: &Parsed<'_>,
    op: MutationOp,
    rng: &mut ChaCha8Rng,
) -> Vec<Edit> {
    let toks = &parsed.toks;
    let probes: BTreeSet<&str> = parsed
        .items
        .iter()
        .filter_map(|it| match it {
            Item::Decl {
                kind: DeclKind::Probe,
                name,
                ..
            } => Some(name.text),
            _ => None,
        })
        .collect();
    let assign_targets: Vec<&str> = parsed
        .items
        .iter()
        .filter_map(|it| match it {
            Item::Assign { target, .. } => Some(target.text),
            _ => None,
        })
        .collect();

    match op {
        MutationOp::DropSemicolon => parsed
            .items
            .iter()
            .map(|it| {
                let semi = &toks[it.semi()];
                Edit {
                    start: semi.offset,
                    end: semi.end(),
                    replacement: String::new(),
                }
            })
            .collect(),
        MutationOp::DuplicateClockDecl => parsed
            .items
            .iter()
            .filter_map(|it| match it {
                Item::Decl {
                    kind: DeclKind::Clock,
                    name,
                    first,
                    semi,
                } => {
                    let at = toks[*semi].end();
                    Some(Edit {
                        start: at,
                        end: at,
                        replacement: format!(
                            "\n{}clock {};",
                            indent_of(text, toks[*first].offset),
                            name.text
                        ),
                    })
                }
                _ => None,
            })
            .collect(),
        MutationOp::ProbeInitZero => parsed
            .items
            .iter()
            .filter_map(|it| match it {
                Item::Init { target, value, .. }
                    if probes.contains(target.text)
                        && value.text.bytes().any(|b| b != b'0' && b != b'_') =>
                {
                    Some(Edit {
                        start: value.offset,
                        end: value.end(),
                        replacement: "0".to_string(),
                    })
                }
                _ => None,
            })
            .collect(),
        MutationOp::StrayAssignment => {
            let Some(first_decl) = parsed
                .items
                .iter()
                .find(|it| matches!(it, Item::Decl { .. }))
            else {
                return Vec::new();
            };
            let decl_offset = toks[first_decl.first()].offset;
            let at = line_start(text, decl_offset);
            let indent = indent_of(text, decl_offset);
            parsed
                .items
                .iter()
                .filter(|it| matches!(it, Item::Assign { .. }))
                .map(|it| Edit {
                    start: at,
                    end: at,
                    replacement: format!(
                        "{indent}{}\n",
                        &text[toks[it.first()].offset..toks[it.semi()].end()]
                    ),
                })
                .collect()
        }
        MutationOp::PulseUndeclared => {
            let Some(end_idx) = parsed.endmodule else {
                return Vec::new();
            };
            let end_tok = &toks[end_idx];
            let at = line_start(text, end_tok.offset);
            let indent = parsed
                .items
                .last()
                .map_or("    ", |it| indent_of(text, toks[it.first()].offset));
            let name = fresh_ident(parsed, "ghost", rng);
            vec![Edit {
                start: at,
                end: at,
                replacement: format!("{indent}pulse {name};\n"),
            }]
        }
        MutationOp::RenameIdentifierUse => {
            let uses: Vec<_> = parsed
                .items
                .iter()
                .filter_map(|it| match it {
                    Item::Assign { rhs, .. } => Some(rhs),
                    _ => None,
                })
                .flatten()
                .filter(|t| t.kind == TokenKind::Identifier)
                .collect();
            uses.into_iter()
                .map(|t| Edit {
                    start: t.offset,
                    end: t.end(),
                    replacement: fresh_ident(parsed, t.text, rng),
                })
                .collect()
        }
        MutationOp::DemoteTopOutput => parsed
            .ports
            .iter()
            .filter(|p| p.dir == PortDir::Output && assign_targets.contains(&p.name.text))
            .map(|p| Edit {
                start: p.dir_token.offset,
                end: p.dir_token.end(),
                replacement: "input".to_string(),
            })
            .collect(),
        MutationOp::DeleteAssignment => {
            let needs_driver: BTreeSet<&str> = parsed
                .ports
                .iter()
                .filter(|p| p.dir == PortDir::Output)
                .map(|p| p.name.text)
                .chain(parsed.items.iter().filter_map(|it| match it {
                    Item::Decl {
                        kind: DeclKind::Wire,
                        name,
                        ..
                    } => Some(name.text),
                    _ => None,
                }))
                .collect();
            parsed
                .items
                .iter()
                .filter_map(|it| match it {
                    Item::Assign { target, .. }
                        if needs_driver.contains(target.text)
                            && assign_targets.iter().filter(|&&t| t == target.text).count()
                                == 1 =>
                    {
                        Some(statement_removal(
                            text,
                            toks[it.first()].offset,
                            toks[it.semi()].end(),
                        ))
                    }
                    _ => None,
                })
                .collect()
        }
    }
}

/// Remove a statement, taking its whole line when nothing else but
/// whitespace or a trailing comment shares it.
fn statement_removal(text: &str, start: usize, end: usize) -> Edit {
    let ls = line_start(text, start);
    let le = line_end_inclusive(text, end);
    let before = &text[ls..start];
    let after = text[end..le].trim();
    let whole_line = before.trim().is_empty() && (after.is_empty() || after.starts_with("//"));
    let (start, end) = if whole_line { (ls, le) } else { (start, end) };
    Edit {
        start,
        end,
        replacement: String::new(),
    }
}

/// Apply `op` to `source` at a site chosen by a PRNG keyed on
/// `(rng_seed, source.path, op)`.
pub fn mutate(
    source: &SourceFile,
    op: MutationOp,
    rng_seed: u64,
) -> Result<(String, MutationRecord), MiniHdlError> {
    let parsed = parse(&source.text);
    let mut rng = site_rng(rng_seed, &source.path, op);
    let mut edits = candidate_edits(&source.text, &parsed, op, &mut rng);
    if edits.is_empty() {
        return Err(MiniHdlError::NotApplicable {
            op,
            path: source.path.clone(),
        });
    }
    let pick = rng.random_range(0..edits.len());
    let edit = edits.swap_remove(pick);
    let text = &source.text;
    let mut mutant = String::with_capacity(text.len() + edit.replacement.len());
    mutant.push_str(&text[..edit.start]);
    mutant.push_str(&edit.replacement);
    mutant.push_str(&text[edit.end..]);
    let record = MutationRecord {
        op_id: op,
        site: Span {
            start: edit.start,
            end: edit.end,
        },
        original_text: text[edit.start..edit.end].to_string(),
        replacement_text: edit.replacement,
        rng_seed,
    };
    Ok((mutant, record))
}

/// Undo a mutation, restoring the original bytes.
pub fn revert(mutant: &str, record: &MutationRecord) -> Result<String, MiniHdlError> {
    let span = record.mutant_span();
    let corrupt = || MiniHdlError::CorruptRecord {
        start: span.start,
        end: span.end,
    };
    let found = mutant.get(span.start..span.end).ok_or_else(corrupt)?;
    if found != record.replacement_text {
        return Err(corrupt());
    }
    let mut out = String::with_capacity(mutant.len() + record.original_text.len());
    out.push_str(&mutant[..span.start]);
    out.push_str(&record.original_text);
    out.push_str(&mutant[span.end..]);
    Ok(out)
}
