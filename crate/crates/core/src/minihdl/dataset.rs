use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::check::{check, format_message};
use super::mutate::{mutate, MutationOp, MutationRecord};
use super::{MiniHdlError, SourceFile};

/// One training triple: buggy code, its checker message, and the correct
/// code it was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeInstance {
    pub id: String,
    pub buggy: String,
    pub message: String,
    pub correct: String,
    /// Mutation op id; doubles as the bug-pattern class label.
    pub label: MutationOp,
    pub record: MutationRecord,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct GenerationReport {
    pub instances: Vec<CodeInstance>,
    /// mutants that passed the checker and were dropped
    pub accidental_passes: usize,
    pub not_applicable: usize,
    /// variants of one (seed, op) that reproduced an earlier mutant
    pub duplicates: usize,
}

/// Read every `*.mhdl` file in `dir`, sorted by file name.
pub fn load_seeds(dir: &Path) -> Result<Vec<SourceFile>, MiniHdlError> {
    let io = |source| MiniHdlError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "mhdl") && p.is_file());
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(|source| MiniHdlError::Io {
                path: p.clone(),
                source,
            })?;
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            SourceFile::from_bytes(name, bytes)
        })
        .collect()
}

enum Outcome {
    Instance(CodeInstance),
    AccidentalPass,
    NotApplicable,
}

/// Apply every op to every seed, `per_seed` variants per `(seed, op)` pair.
///
/// Variant `v` uses `rng_seed + v` as its site-selection seed. Output order
/// is seed order, then op order, then variant order, independent of how the
/// work is scheduled.
pub fn generate_dataset(
    seeds: &[SourceFile],
    per_seed: usize,
    ops: &[MutationOp],
    rng_seed: u64,
) -> Result<GenerationReport, MiniHdlError> {
    for seed in seeds {
        let diags = check(&seed.text);
        if !diags.is_empty() {
            return Err(MiniHdlError::RejectedSeed {
                path: seed.path.clone(),
                message: format_message(&diags),
            });
        }
    }

    let tasks: Vec<(&SourceFile, MutationOp, usize)> = seeds
        .iter()
        .flat_map(|s| {
            ops.iter()
                .flat_map(move |&op| (0..per_seed).map(move |v| (s, op, v)))
        })
        .collect();

    let outcomes: Vec<Outcome> = tasks
        .par_iter()
        .map(|&(seed, op, variant)| {
            let seed_value = rng_seed.wrapping_add(variant as u64);
            match mutate(seed, op, seed_value) {
                Err(MiniHdlError::NotApplicable { .. }) => Outcome::NotApplicable,
                Err(e) => unreachable!("mutate only fails with NotApplicable: {e}"),
                Ok((buggy, record)) => {
                    let diags = check(&buggy);
                    if !diags.iter().any(|d| d.code == op.error_code()) {
                        return Outcome::AccidentalPass;
                    }
                    Outcome::Instance(CodeInstance {
                        id: format!("{}/{}/{}", seed.stem(), op.id(), variant),
                        buggy,
                        message: format_message(&diags),
                        correct: seed.text.clone(),
                        label: op,
                        record,
                    })
                }
            }
        })
        .collect();

    let mut report = GenerationReport::default();
    for (outcome, &(seed, op, _)) in outcomes.into_iter().zip(&tasks) {
        match outcome {
            Outcome::NotApplicable => report.not_applicable += 1,
            Outcome::AccidentalPass => report.accidental_passes += 1,
            Outcome::Instance(inst) => {
                let duplicate = report
                    .instances
                    .iter()
                    .rev()
                    .take_while(|i| i.label == op && i.correct == seed.text)
                    .any(|i| i.buggy == inst.buggy);
                if duplicate {
                    report.duplicates += 1;
                } else {
                    report.instances.push(inst);
                }
            }
        }
    }
    Ok(report)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), MiniHdlError> {
    let io = |source| MiniHdlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|source| MiniHdlError::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Read a JSONL file; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, MiniHdlError> {
    let io = |source| MiniHdlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|source| MiniHdlError::Json {
                path: path.to_path_buf(),
                line: n + 1,
                source,
            })?,
        );
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minihdl::revert;

    fn seeds_dir() -> &'static Path {
        Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/seeds"))
    }

    #[test]
    fn one_seed_all_ops() {
        let seeds = load_seeds(seeds_dir()).unwrap();
        let report = generate_dataset(&seeds[..1], 1, &MutationOp::ALL, 7).unwrap();
        assert_eq!(report.instances.len(), 8);
        let labels: std::collections::BTreeSet<_> =
            report.instances.iter().map(|i| i.label).collect();
        assert_eq!(labels.len(), 8);
        for inst in &report.instances {
            assert!(check(&inst.correct).is_empty());
            let diags = check(&inst.buggy);
            assert!(diags.iter().any(|d| d.code == inst.label.error_code()));
            assert_eq!(inst.message, format_message(&diags));
            assert_eq!(revert(&inst.buggy, &inst.record).unwrap(), inst.correct);
        }
    }

    #[test]
    fn rejected_seed() {
        let bad = SourceFile::new("bad.mhdl", "module m (output y);\nendmodule\n");
        let err = generate_dataset(&[bad], 1, &MutationOp::ALL, 1).unwrap_err();
        match err {
            MiniHdlError::RejectedSeed { path, message } => {
                assert_eq!(path, "bad.mhdl");
                assert!(message.contains("P-error-8"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn replay_is_byte_identical() {
        let seeds = load_seeds(seeds_dir()).unwrap();
        assert!(seeds.len() >= 20);
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let report = generate_dataset(&seeds[..20], 1, &MutationOp::ALL, 1).unwrap();
            let path = dir.path().join(format!("run{run}.jsonl"));
            write_jsonl(&path, &report.instances).unwrap();
            outputs.push(fs::read(&path).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
        let back: Vec<CodeInstance> = read_jsonl(&dir.path().join("run0.jsonl")).unwrap();
        assert_eq!(back.len(), 160);
    }

    #[test]
    fn variants_use_distinct_streams() {
        let seeds = load_seeds(seeds_dir()).unwrap();
        let report =
            generate_dataset(&seeds[..2], 4, &[MutationOp::RenameIdentifierUse], 3).unwrap();
        assert_eq!(report.instances.len() + report.duplicates, 8);
        let ids: std::collections::BTreeSet<_> = report.instances.iter().map(|i| &i.id).collect();
        assert_eq!(ids.len(), report.instances.len());
    }

    #[test]
    fn bad_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\n\nnot json\n").unwrap();
        let err = read_jsonl::<serde_json::Value>(&path).unwrap_err();
        assert!(matches!(err, MiniHdlError::Json { line: 3, .. }), "{err}");
    }
}
