//! Self-guided thought generation and fine-tuning export.
//!
//! For each training instance, `L` thoughts are sampled with the correct
//! script visible, each thought is scored by asking for a repair from it
//! (correct script hidden) and measuring token edit distance to the truth,
//! and the closest one is kept.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{build_doc_rag, DocRag, ErrorDb};
use crate::llm::{self, ChatMessage, Exemplar, GenRequest, LlmError, Transport};
use crate::minihdl::{significant_texts, CodeInstance};
use crate::retrieval::{search, CodeRagEntry, Query, RetrievalError, SelectionParams};
use crate::vectorize::{CodeIndex, Embedder};
use crate::Scalar;

pub const SFT_SCHEMA: &str = "hdldbg-sft";
pub const SFT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("sample {sample_index} failed ({} earlier samples kept): {source}", completed.len())]
    Sample {
        sample_index: usize,
        completed: Vec<Thought>,
        #[source]
        source: LlmError,
    },
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Journal {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

type Result<T, E = ForgeError> = std::result::Result<T, E>;

/// Levenshtein distance between two sequences (two-row DP).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level edit distance, ignoring whitespace and comments.
pub fn edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&significant_texts(a), &significant_texts(b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub sample_index: usize,
    pub thought: String,
}

/// A scored thought; also the journal line format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtRecord {
    pub instance_id: String,
    pub sample_index: usize,
    pub thought: String,
    pub predicted_code: String,
    pub distance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeParams {
    pub samples: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl Default for ForgeParams {
    fn default() -> Self {
        ForgeParams {
            samples: 5,
            temperature: 0.7,
            max_tokens: 1024,
            model: "default".into(),
        }
    }
}

fn request(
    messages: Vec<ChatMessage>,
    temperature: f64,
    seed: Option<u64>,
    p: &ForgeParams,
) -> GenRequest {
    GenRequest {
        model: p.model.clone(),
        messages,
        temperature,
        max_tokens: p.max_tokens,
        seed,
    }
}

/// Request for thought sample `j`: the correct script is visible and the
/// sample index doubles as the service seed.
pub fn thought_request(inst: &CodeInstance, doc: &DocRag, j: usize, p: &ForgeParams) -> GenRequest {
    let messages = llm::prompt_thought(&inst.buggy, &inst.message, doc, Some(&inst.correct));
    request(messages, p.temperature, Some(j as u64), p)
}

/// Request for the repair induced by `thought`, at temperature 0.
pub fn scoring_request(
    inst: &CodeInstance,
    doc: &DocRag,
    thought: &str,
    p: &ForgeParams,
) -> Result<GenRequest, LlmError> {
    let messages = llm::prompt_correct(&inst.buggy, &inst.message, doc, None, thought)?;
    Ok(request(messages, 0.0, None, p))
}

/// Sample `params.samples` thoughts; sample `j` is requested with seed `j`.
pub fn gen_thoughts(
    inst: &CodeInstance,
    doc: &DocRag,
    transport: &Transport,
    params: &ForgeParams,
) -> Result<Vec<Thought>> {
    if params.samples == 0 {
        return Err(ForgeError::Precondition(
            "at least one sample is required".into(),
        ));
    }
    let mut out = Vec::with_capacity(params.samples);
    for j in 0..params.samples {
        match transport.complete(&thought_request(inst, doc, j, params)) {
            Ok(thought) => out.push(Thought {
                sample_index: j,
                thought,
            }),
            Err(source) => {
                return Err(ForgeError::Sample {
                    sample_index: j,
                    completed: out,
                    source,
                })
            }
        }
    }
    Ok(out)
}

/// Ask for a repair from each thought at temperature 0 and measure it.
pub fn score_thoughts(
    inst: &CodeInstance,
    doc: &DocRag,
    thoughts: &[Thought],
    transport: &Transport,
    params: &ForgeParams,
) -> Result<Vec<ThoughtRecord>> {
    if thoughts.is_empty() {
        return Err(ForgeError::Precondition("no thoughts to score".into()));
    }
    let mut out = Vec::with_capacity(thoughts.len());
    for t in thoughts {
        let fail = |source| ForgeError::Sample {
            sample_index: t.sample_index,
            completed: Vec::new(),
            source,
        };
        let req = scoring_request(inst, doc, &t.thought, params).map_err(fail)?;
        let reply = transport.complete(&req).map_err(fail)?;
        let predicted_code = llm::extract_code(&reply);
        out.push(ThoughtRecord {
            instance_id: inst.id.clone(),
            sample_index: t.sample_index,
            thought: t.thought.clone(),
            distance: edit_distance(&inst.correct, &predicted_code),
            predicted_code,
        });
    }
    Ok(out)
}

/// Smallest distance; ties go to the lowest sample index.
pub fn select_best(records: &[ThoughtRecord]) -> Option<&ThoughtRecord> {
    records.iter().min_by_key(|r| (r.distance, r.sample_index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord<T> {
    pub instance_id: String,
    pub buggy: String,
    pub message: String,
    pub doc_rag: DocRag,
    pub code_rag: Vec<CodeRagEntry<T>>,
    pub thought: String,
    pub correct: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub instance_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport<T> {
    /// Dataset order; failed instances are absent.
    pub records: Vec<TrainingRecord<T>>,
    pub failures: Vec<Failure>,
    /// Instances taken from the journal without new requests.
    pub resumed: usize,
}

/// Read a journal, dropping a torn final line left by an interrupted write.
pub fn read_journal(path: &Path) -> Result<Vec<ThoughtRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(ForgeError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let complete = match text.rfind('\n') {
        Some(n) => &text[..=n],
        None => "",
    };
    if complete.len() != text.len() {
        fs::write(path, complete).map_err(|source| ForgeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|source| ForgeError::Journal {
                path: path.to_path_buf(),
                line: n + 1,
                source,
            })
        })
        .collect()
}

fn exemplars<T>(code: &[CodeRagEntry<T>]) -> Vec<Exemplar<'_>> {
    code.iter()
        .map(|e| Exemplar {
            buggy: &e.buggy,
            message: &e.message,
            correct: &e.correct,
        })
        .collect()
}

pub struct TrainingSetup<'a, T> {
    pub index: &'a CodeIndex<T>,
    pub embedder: &'a dyn Embedder<T>,
    pub db: &'a ErrorDb,
    pub transport: &'a Transport,
    pub selection: SelectionParams<T>,
    pub forge: ForgeParams,
    pub journal: &'a Path,
}

fn thoughts_for(
    inst: &CodeInstance,
    doc: &DocRag,
    s: &TrainingSetup<'_, impl Scalar>,
) -> Result<Vec<ThoughtRecord>> {
    let thoughts = gen_thoughts(inst, doc, s.transport, &s.forge)?;
    score_thoughts(inst, doc, &thoughts, s.transport, &s.forge)
}

/// Build one training record per instance. Scored thoughts go to the
/// journal in dataset order, one flushed line each; instances already
/// complete in the journal are not re-requested. Failures are collected,
/// not fatal.
pub fn build_training_set<T: Scalar>(
    dataset: &[CodeInstance],
    setup: &TrainingSetup<'_, T>,
) -> Result<TrainingReport<T>> {
    if setup.forge.samples == 0 {
        return Err(ForgeError::Precondition(
            "at least one sample is required".into(),
        ));
    }
    let mut done: BTreeMap<String, Vec<ThoughtRecord>> = BTreeMap::new();
    for rec in read_journal(setup.journal)? {
        done.entry(rec.instance_id.clone()).or_default().push(rec);
    }
    done.retain(|_, recs| {
        recs.sort_by_key(|r| r.sample_index);
        recs.dedup_by_key(|r| r.sample_index);
        recs.len() == setup.forge.samples
            && recs.iter().enumerate().all(|(j, r)| r.sample_index == j)
    });

    let journal_err = |source| ForgeError::Io {
        path: setup.journal.to_path_buf(),
        source,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(setup.journal)
        .map_err(journal_err)?;

    let pending: Vec<usize> = (0..dataset.len())
        .filter(|&i| !done.contains_key(&dataset[i].id))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.transport.max_in_flight())
        .build()
        .map_err(|e| ForgeError::Precondition(e.to_string()))?;

    let (tx, rx) = mpsc::channel::<(usize, Result<Vec<ThoughtRecord>>)>();
    let total = pending.len();
    let fresh = std::thread::scope(|scope| {
        let writer = scope.spawn(move || write_in_order(file, rx, total));
        pool.install(|| {
            pending
                .par_iter()
                .enumerate()
                .for_each_with(tx, |tx, (slot, &i)| {
                    let inst = &dataset[i];
                    let doc = build_doc_rag(&inst.message, setup.db);
                    let _ = tx.send((slot, thoughts_for(inst, &doc, setup)));
                });
        });
        writer.join().expect("journal writer does not panic")
    })
    .map_err(journal_err)?;

    let mut fresh: BTreeMap<usize, Result<Vec<ThoughtRecord>>> = fresh.into_iter().collect();
    let mut report = TrainingReport {
        records: Vec::new(),
        failures: Vec::new(),
        resumed: 0,
    };
    let mut slot = 0;
    for inst in dataset {
        let scored = match done.remove(&inst.id) {
            Some(recs) => {
                report.resumed += 1;
                recs
            }
            None => {
                let r = fresh.remove(&slot).expect("every pending instance reports");
                slot += 1;
                match r {
                    Ok(recs) => recs,
                    Err(e) => {
                        report.failures.push(Failure {
                            instance_id: inst.id.clone(),
                            error: e.to_string(),
                        });
                        continue;
                    }
                }
            }
        };
        let best = select_best(&scored).expect("samples >= 1");
        let query = Query::new(setup.index, setup.embedder, &inst.buggy, &inst.message)?;
        let bundle = search(
            setup.index,
            &query,
            &setup.selection,
            setup.db,
            Some(&inst.id),
        )?;
        report.records.push(TrainingRecord {
            instance_id: inst.id.clone(),
            buggy: inst.buggy.clone(),
            message: inst.message.clone(),
            doc_rag: bundle.doc_rag,
            code_rag: bundle.code_rag,
            thought: best.thought.clone(),
            correct: inst.correct.clone(),
        });
    }
    Ok(report)
}

/// Appends results as soon as every earlier slot has arrived, so the
/// journal is identical however the work was scheduled.
fn write_in_order(
    file: File,
    rx: mpsc::Receiver<(usize, Result<Vec<ThoughtRecord>>)>,
    total: usize,
) -> std::io::Result<Vec<(usize, Result<Vec<ThoughtRecord>>)>> {
    let mut w = BufWriter::new(file);
    let mut waiting: BTreeMap<usize, Result<Vec<ThoughtRecord>>> = BTreeMap::new();
    let mut finished = Vec::with_capacity(total);
    let mut next = 0;
    for (slot, result) in rx {
        waiting.insert(slot, result);
        while let Some(result) = waiting.remove(&next) {
            if let Ok(recs) = &result {
                for r in recs {
                    let mut line = serde_json::to_string(r).expect("record serializes");
                    line.push('\n');
                    w.write_all(line.as_bytes())?;
                    w.flush()?;
                }
            }
            finished.push((next, result));
            next += 1;
        }
    }
    Ok(finished)
}

#[derive(Debug, Serialize, Deserialize)]
struct SftHeader {
    schema: String,
    version: u32,
    records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SftRow {
    pub context: String,
    pub target_thought: String,
    pub target_code: String,
}

pub fn sft_row<T>(rec: &TrainingRecord<T>) -> SftRow {
    SftRow {
        context: llm::render_context(
            &rec.buggy,
            &rec.message,
            &rec.doc_rag,
            &exemplars(&rec.code_rag),
        ),
        target_thought: rec.thought.clone(),
        target_code: rec.correct.clone(),
    }
}

/// Write the fine-tuning set: a header line, then one row per record.
pub fn export_sft<T>(records: &[TrainingRecord<T>], out: &Path) -> Result<usize> {
    let err = |source| ForgeError::Io {
        path: out.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(out).map_err(err)?);
    let header = SftHeader {
        schema: SFT_SCHEMA.into(),
        version: SFT_VERSION,
        records: records.len(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(err)?;
    for rec in records {
        let mut line = serde_json::to_string(&sft_row(rec)).expect("row serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(err)?;
    }
    w.flush().map_err(err)?;
    Ok(records.len())
}
