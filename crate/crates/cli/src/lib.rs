//! Command-line front end for the hdldbg pipeline.
//!
//! [`run`] parses arguments and executes one command, writing results to
//! the given streams; `main` maps the returned error to an exit code.

pub mod config;
pub mod scripted;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use hdldbg_core::evalkit::{self, EvalReport, RankedResult, RepairOutcome};
use hdldbg_core::knowledge::{DocRag, ErrorDb, KnowledgeError};
use hdldbg_core::llm::{
    self, Exemplar, FixtureStore, GenRequest, LlmError, Mode, RetryPolicy, Transport,
};
use hdldbg_core::minihdl::{
    check, generate_dataset, load_seeds, read_jsonl, write_jsonl, CodeInstance, MiniHdlError,
    MutationOp,
};
use hdldbg_core::retrieval::{search, CodeRagEntry, Query, RetrievalError};
use hdldbg_core::thoughtforge::{
    self, build_training_set, export_sft, ForgeError, ForgeParams, TrainingSetup,
};
use hdldbg_core::vectorize::{
    build_index, load_index, save_index, Embedder, HashEmbedder, RemoteEmbedder, VectorizeError,
};
use hdldbg_core::{CodeIndex, RagBundle, SelectionParams};

pub use config::{Config, EmbedderKind, Overrides, TransportMode, CONFIG_HELP};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Config(_) => 3,
            CliError::Transport(_) => 4,
        }
    }
}

impl From<MiniHdlError> for CliError {
    fn from(e: MiniHdlError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<KnowledgeError> for CliError {
    fn from(e: KnowledgeError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Precondition(_) | LlmError::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Transport(e.to_string()),
        }
    }
}

impl From<VectorizeError> for CliError {
    fn from(e: VectorizeError) -> Self {
        match e {
            VectorizeError::Transport(inner) => inner.into(),
            VectorizeError::Fingerprint { .. } | VectorizeError::Precondition(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Vectorize(inner) => inner.into(),
            RetrievalError::InvalidParams(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ForgeError> for CliError {
    fn from(e: ForgeError) -> Self {
        match e {
            ForgeError::Sample { source, .. } => source.into(),
            ForgeError::Retrieval(inner) => inner.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "hdldbg",
    version,
    about = "Retrieval-augmented repair of mini-HDL scripts."
)]
#[command(after_help = CONFIG_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (buggy, message, correct) instances from seed scripts
    Gen {
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated mutation ops [default: all]
        #[arg(long, value_delimiter = ',')]
        ops: Vec<MutationOp>,
        /// Variants per (seed, op) pair
        #[arg(long, default_value_t = 1)]
        per_seed: usize,
        #[arg(long, default_value_t = 0)]
        rng_seed: u64,
    },
    /// Build the keyword and semantic vector index of a dataset
    Index {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve documentation and similar instances for a buggy script
    Search {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        buggy: PathBuf,
        #[arg(long)]
        errors: PathBuf,
        /// Keep this instance id out of the results
        #[arg(long)]
        exclude: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Sample and score thoughts for every instance into a resumable journal
    Thoughts {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Journal file (JSONL)
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the fine-tuning dataset (thoughts come from the journal)
    Export {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Journal file [default: <out>.journal.jsonl]
        #[arg(long)]
        journal: Option<PathBuf>,
    },
    /// Analyse and repair one buggy script
    Debug {
        #[arg(long)]
        buggy: PathBuf,
        #[arg(long)]
        errors: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Ask for analysis and repair in one request
        #[arg(long)]
        single_call: bool,
        /// Write the corrected script here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Score corrected scripts against references
    Eval {
        /// `<name>.mhdl` per problem, or a `<name>/` directory of samples
        #[arg(long)]
        pred: PathBuf,
        /// Reference scripts, `<name>.mhdl`
        #[arg(long)]
        refs: PathBuf,
        /// Also report checker runtime relative to the references
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ranking metrics of the retriever on labelled queries
    EvalRetrieval {
        #[arg(long)]
        index: Option<PathBuf>,
        /// JSONL with `buggy`, `message`, `label` and optional `id`
        #[arg(long)]
        queries: PathBuf,
        #[arg(
            short = 'K',
            long = "ks",
            value_delimiter = ',',
            default_value = "1,3,10"
        )]
        ks: Vec<usize>,
        /// Drop each query's own id from its results
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parse `args` and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Input(e.to_string())),
    };
    let cfg = Config::resolve(&cli.overrides)?;
    let mut ctx = Ctx { cfg, out, err };
    match cli.command {
        Command::Gen {
            seeds,
            out,
            ops,
            per_seed,
            rng_seed,
        } => ctx.gen(&seeds, &out, &ops, per_seed, rng_seed),
        Command::Index { dataset, out } => ctx.index(dataset, out),
        Command::Search {
            index,
            buggy,
            errors,
            exclude,
            json,
        } => ctx.search(index, &buggy, &errors, exclude.as_deref(), json),
        Command::Thoughts {
            dataset,
            index,
            out,
        } => ctx.thoughts(dataset, index, &out).map(|_| ()),
        Command::Export {
            dataset,
            index,
            out,
            journal,
        } => ctx.export(dataset, index, &out, journal),
        Command::Debug {
            buggy,
            errors,
            index,
            single_call,
            out,
            json,
        } => ctx.debug(&buggy, &errors, index, single_call, out.as_deref(), json),
        Command::Eval {
            pred,
            refs,
            timing,
            out,
        } => ctx.eval(&pred, &refs, timing, out.as_deref()),
        Command::EvalRetrieval {
            index,
            queries,
            ks,
            exclude_self,
            out,
        } => ctx.eval_retrieval(index, &queries, &ks, exclude_self, out.as_deref()),
    }
}

/// Build the transport described by the config.
pub fn make_transport(cfg: &Config) -> Result<Transport, CliError> {
    let retry = RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(cfg.retry_base_ms),
    };
    let mode = match cfg.transport {
        TransportMode::Replay => {
            let dir = cfg
                .fixtures
                .clone()
                .ok_or_else(|| CliError::Config("replay transport needs `fixtures`".into()))?;
            Mode::Replay(FixtureStore::new(dir))
        }
        TransportMode::Live => {
            let endpoint = cfg.endpoint.clone().ok_or_else(|| {
                CliError::Config(
                    "live transport needs `endpoint` (config key or --endpoint)".into(),
                )
            })?;
            Mode::Live {
                endpoint,
                api_key: std::env::var(llm::API_KEY_ENV)
                    .ok()
                    .filter(|k| !k.is_empty()),
                record: cfg.fixtures.clone().map(FixtureStore::new),
            }
        }
    };
    Ok(Transport::new(mode, retry, cfg.max_in_flight))
}

pub fn make_embedder<'t>(
    cfg: &Config,
    transport: Option<&'t Transport>,
) -> Result<Box<dyn Embedder<f32> + 't>, CliError> {
    match cfg.embedder {
        EmbedderKind::Hash => Ok(Box::new(HashEmbedder { dim: cfg.dense_dim })),
        EmbedderKind::Remote => {
            let transport = transport
                .ok_or_else(|| CliError::Config("remote embedder needs a transport".into()))?;
            Ok(Box::new(RemoteEmbedder {
                transport,
                model: cfg.embedding_model.clone(),
                dim: cfg.dense_dim,
                chunk_tokens: cfg.chunk_ns,
            }))
        }
    }
}

pub fn selection(cfg: &Config) -> SelectionParams {
    SelectionParams {
        lambda: cfg.lambda as f32,
        stage1_n: cfg.stage1_n,
        k: cfg.k,
    }
}

pub fn forge_params(cfg: &Config) -> ForgeParams {
    ForgeParams {
        samples: cfg.thoughts_l,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        model: cfg.chat_model.clone(),
    }
}

pub fn exemplars<T>(code: &[CodeRagEntry<T>]) -> Vec<Exemplar<'_>> {
    code.iter()
        .map(|e| Exemplar {
            buggy: &e.buggy,
            message: &e.message,
            correct: &e.correct,
        })
        .collect()
}

fn inference(cfg: &Config, messages: Vec<llm::ChatMessage>) -> GenRequest {
    GenRequest {
        model: cfg.chat_model.clone(),
        messages,
        temperature: 0.0,
        max_tokens: cfg.max_tokens,
        seed: None,
    }
}

/// First debug request: the analysis.
pub fn analysis_request(
    cfg: &Config,
    buggy: &str,
    message: &str,
    bundle: &RagBundle,
) -> GenRequest {
    let ex = exemplars(&bundle.code_rag);
    inference(
        cfg,
        llm::prompt_analysis(buggy, message, &bundle.doc_rag, &ex),
    )
}

/// Second debug request: the repair from the analysis.
pub fn repair_request(
    cfg: &Config,
    buggy: &str,
    message: &str,
    bundle: &RagBundle,
    thought: &str,
) -> Result<GenRequest, LlmError> {
    let ex = exemplars(&bundle.code_rag);
    let msgs = llm::prompt_correct(buggy, message, &bundle.doc_rag, Some(&ex), thought)?;
    Ok(inference(cfg, msgs))
}

pub fn single_call_request(
    cfg: &Config,
    buggy: &str,
    message: &str,
    bundle: &RagBundle,
) -> GenRequest {
    let ex = exemplars(&bundle.code_rag);
    inference(
        cfg,
        llm::prompt_single_call(buggy, message, &bundle.doc_rag, &ex),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugReport {
    pub thought: String,
    pub code: String,
    pub pass: bool,
    pub diagnostics: Vec<String>,
    pub code_rag: Vec<String>,
    pub requests: usize,
}

#[derive(Debug, Deserialize)]
struct QueryRow {
    #[serde(default)]
    id: Option<String>,
    buggy: String,
    message: String,
    label: MutationOp,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn pretty<S: Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

struct Ctx<'a> {
    cfg: Config,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        let _ = writeln!($w, $($arg)*);
    };
}

impl Ctx<'_> {
    fn path(
        &self,
        flag: Option<PathBuf>,
        key: &Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf, CliError> {
        flag.or_else(|| key.clone()).ok_or_else(|| {
            CliError::Input(format!(
                "--{name} is required (or set `{name}` in the config)"
            ))
        })
    }

    fn db(&self) -> Result<ErrorDb, CliError> {
        match &self.cfg.error_db {
            Some(p) => Ok(ErrorDb::load(p)?),
            None => Ok(ErrorDb::shipped()),
        }
    }

    fn needs_transport_for_embedding(&self) -> Result<Option<Transport>, CliError> {
        match self.cfg.embedder {
            EmbedderKind::Hash => Ok(None),
            EmbedderKind::Remote => make_transport(&self.cfg).map(Some),
        }
    }

    fn load_index(&self, dir: &Path, embedder: &dyn Embedder<f32>) -> Result<CodeIndex, CliError> {
        Ok(load_index(dir, &embedder.fingerprint())?)
    }

    fn gen(
        &mut self,
        seeds: &Path,
        out: &Path,
        ops: &[MutationOp],
        per_seed: usize,
        rng_seed: u64,
    ) -> Result<(), CliError> {
        let files = load_seeds(seeds)?;
        if files.is_empty() {
            return Err(CliError::Input(format!(
                "no .mhdl files in {}",
                seeds.display()
            )));
        }
        let ops = if ops.is_empty() {
            &MutationOp::ALL[..]
        } else {
            ops
        };
        let report = generate_dataset(&files, per_seed, ops, rng_seed)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_jsonl(out, &report.instances)?;
        say!(
            self.out,
            "wrote {} instances from {} seeds to {} (not applicable: {}, passed checker: {}, duplicates: {})",
            report.instances.len(),
            files.len(),
            out.display(),
            report.not_applicable,
            report.accidental_passes,
            report.duplicates
        );
        Ok(())
    }

    fn index(&mut self, dataset: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
        let dataset = self.path(dataset, &self.cfg.dataset, "dataset")?;
        let out = self.path(out, &self.cfg.index, "index")?;
        let transport = self.needs_transport_for_embedding()?;
        let embedder = make_embedder(&self.cfg, transport.as_ref())?;
        let instances: Vec<CodeInstance> = read_jsonl(&dataset)?;
        let index = build_index(&instances, embedder.as_ref())?;
        save_index(&out, &index)?;
        say!(
            self.out,
            "indexed {} instances into {} ({} terms, embedder {})",
            index.vectors.len(),
            out.display(),
            index.tfidf.vocab_size(),
            index.vectors.fingerprint
        );
        Ok(())
    }

    fn bundle(
        &mut self,
        index: &CodeIndex,
        embedder: &dyn Embedder<f32>,
        buggy: &str,
        message: &str,
        exclude: Option<&str>,
    ) -> Result<RagBundle, CliError> {
        let query = Query::new(index, embedder, buggy, message)?;
        let bundle = search(index, &query, &selection(&self.cfg), &self.db()?, exclude)?;
        if bundle.clamped {
            say!(
                self.err,
                "warning: only {} similar instances available (k = {})",
                bundle.code_rag.len(),
                self.cfg.k
            );
        }
        Ok(bundle)
    }

    fn search(
        &mut self,
        index: Option<PathBuf>,
        buggy: &Path,
        errors: &Path,
        exclude: Option<&str>,
        json: bool,
    ) -> Result<(), CliError> {
        let dir = self.path(index, &self.cfg.index, "index")?;
        let transport = self.needs_transport_for_embedding()?;
        let embedder = make_embedder(&self.cfg, transport.as_ref())?;
        let index = self.load_index(&dir, embedder.as_ref())?;
        let (b, m) = (read_text(buggy)?, read_text(errors)?);
        let bundle = self.bundle(&index, embedder.as_ref(), &b, &m, exclude)?;
        if json {
            let _ = self.out.write_all(pretty(&bundle).as_bytes());
            return Ok(());
        }
        say!(self.out, "documentation:");
        print_doc(self.out, &bundle.doc_rag);
        say!(self.out, "similar instances:");
        for (rank, e) in bundle.code_rag.iter().enumerate() {
            say!(self.out, "  {}. {}  sim={:.6}", rank + 1, e.id, e.sim);
        }
        Ok(())
    }

    fn training_inputs(
        &self,
        dataset: Option<PathBuf>,
        index: Option<PathBuf>,
    ) -> Result<(Vec<CodeInstance>, PathBuf), CliError> {
        let dataset = self.path(dataset, &self.cfg.dataset, "dataset")?;
        let index = self.path(index, &self.cfg.index, "index")?;
        Ok((read_jsonl(&dataset)?, index))
    }

    fn thoughts(
        &mut self,
        dataset: Option<PathBuf>,
        index: Option<PathBuf>,
        journal: &Path,
    ) -> Result<Vec<thoughtforge::TrainingRecord<f32>>, CliError> {
        let (data, index_dir) = self.training_inputs(dataset, index)?;
        let transport = make_transport(&self.cfg)?;
        let embedder = make_embedder(&self.cfg, Some(&transport))?;
        let index = self.load_index(&index_dir, embedder.as_ref())?;
        let db = self.db()?;
        if let Some(dir) = journal.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let setup = TrainingSetup {
            index: &index,
            embedder: embedder.as_ref(),
            db: &db,
            transport: &transport,
            selection: selection(&self.cfg),
            forge: forge_params(&self.cfg),
            journal,
        };
        let report = build_training_set(&data, &setup)?;
        say!(
            self.out,
            "{} of {} instances have a selected thought ({} resumed from {}, {} failed)",
            report.records.len(),
            data.len(),
            report.resumed,
            journal.display(),
            report.failures.len()
        );
        for f in &report.failures {
            say!(self.err, "failed: {}: {}", f.instance_id, f.error);
        }
        Ok(report.records)
    }

    fn export(
        &mut self,
        dataset: Option<PathBuf>,
        index: Option<PathBuf>,
        out: &Path,
        journal: Option<PathBuf>,
    ) -> Result<(), CliError> {
        let journal = journal.unwrap_or_else(|| {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".journal.jsonl");
            out.with_file_name(name)
        });
        let records = self.thoughts(dataset, index, &journal)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let n = export_sft(&records, out)?;
        say!(self.out, "exported {n} records to {}", out.display());
        Ok(())
    }

    fn debug(
        &mut self,
        buggy: &Path,
        errors: &Path,
        index: Option<PathBuf>,
        single_call: bool,
        out: Option<&Path>,
        json: bool,
    ) -> Result<(), CliError> {
        let dir = self.path(index, &self.cfg.index, "index")?;
        let transport = make_transport(&self.cfg)?;
        let embedder = make_embedder(&self.cfg, Some(&transport))?;
        let index = self.load_index(&dir, embedder.as_ref())?;
        let (b, m) = (read_text(buggy)?, read_text(errors)?);
        let bundle = self.bundle(&index, embedder.as_ref(), &b, &m, None)?;
        let cfg = &self.cfg;
        let (thought, code) = if single_call {
            let reply = transport.complete(&single_call_request(cfg, &b, &m, &bundle))?;
            llm::split_single_call(&reply)
        } else {
            let thought = transport.complete(&analysis_request(cfg, &b, &m, &bundle))?;
            let reply = transport.complete(&repair_request(cfg, &b, &m, &bundle, &thought)?)?;
            (thought.trim().to_string(), llm::extract_code(&reply))
        };
        let diags = check(&code);
        let report = DebugReport {
            pass: diags.is_empty(),
            diagnostics: diags.iter().map(ToString::to_string).collect(),
            code_rag: bundle.code_rag.iter().map(|e| e.id.clone()).collect(),
            requests: transport.requests(),
            thought,
            code,
        };
        if let Some(path) = out {
            write_text(path, &format!("{}\n", report.code))?;
        }
        if json {
            let _ = self.out.write_all(pretty(&report).as_bytes());
        } else {
            say!(self.out, "analysis:\n{}\n", report.thought);
            say!(self.out, "corrected script:\n{}\n", report.code);
            say!(
                self.out,
                "check: {}",
                if report.pass { "pass" } else { "fail" }
            );
            for d in &report.diagnostics {
                say!(self.out, "  {d}");
            }
        }
        Ok(())
    }

    fn eval(
        &mut self,
        pred: &Path,
        refs: &Path,
        timing: bool,
        out: Option<&Path>,
    ) -> Result<(), CliError> {
        let refs_files = load_seeds(refs)?;
        if refs_files.is_empty() {
            return Err(CliError::Input(format!(
                "no reference scripts in {}",
                refs.display()
            )));
        }
        let mut outcomes = Vec::new();
        let mut pairs = Vec::new();
        let mut times = Vec::new();
        let mut base = Vec::new();
        for r in &refs_files {
            let cands = candidates(pred, r.stem())?;
            if timing {
                let t = Instant::now();
                std::hint::black_box(check(&r.text));
                base.push(t.elapsed().as_secs_f64());
                let t = Instant::now();
                std::hint::black_box(check(&cands[0]));
                times.push(t.elapsed().as_secs_f64());
            }
            pairs.push((cands[0].clone(), r.text.clone()));
            outcomes.push(RepairOutcome::from_candidates(r.stem(), &cands));
        }
        let depth = outcomes.iter().map(|o| o.passes.len()).min().unwrap_or(1);
        let mut report = EvalReport {
            pass_rate: Some(evalkit::pass_rate(&outcomes).map_err(eval_err)?),
            edit_distance: Some(evalkit::edit_distance_report(&pairs).map_err(eval_err)?),
            ..Default::default()
        };
        for k in 1..=depth {
            report.pass_at_k.insert(
                k.to_string(),
                evalkit::pass_at_k(&outcomes, k).map_err(eval_err)?,
            );
        }
        if timing {
            let baseline = base.iter().sum::<f64>() / base.len() as f64;
            report.relative_runtime =
                evalkit::relative_runtime(&times, baseline.max(f64::MIN_POSITIVE)).ok();
        }
        self.emit(&report, out)
    }

    fn emit(&mut self, report: &EvalReport, out: Option<&Path>) -> Result<(), CliError> {
        let text = pretty(report);
        if let Some(p) = out {
            write_text(p, &text)?;
        }
        let _ = self.out.write_all(text.as_bytes());
        Ok(())
    }

    fn eval_retrieval(
        &mut self,
        index: Option<PathBuf>,
        queries: &Path,
        ks: &[usize],
        exclude_self: bool,
        out: Option<&Path>,
    ) -> Result<(), CliError> {
        let rows: Vec<QueryRow> = read_jsonl(queries)?;
        if rows.is_empty() {
            return Err(CliError::Input(format!(
                "{} has no queries",
                queries.display()
            )));
        }
        let max_k = ks.iter().copied().max().unwrap_or(0);
        if max_k == 0 || ks.contains(&0) {
            return Err(CliError::Input("K values must be positive".into()));
        }
        let dir = self.path(index, &self.cfg.index, "index")?;
        let transport = self.needs_transport_for_embedding()?;
        let embedder = make_embedder(&self.cfg, transport.as_ref())?;
        let index = self.load_index(&dir, embedder.as_ref())?;
        let labels: BTreeMap<&str, MutationOp> = index
            .vectors
            .ids
            .iter()
            .map(String::as_str)
            .zip(index.vectors.labels.iter().copied())
            .collect();
        let params = SelectionParams {
            k: max_k,
            stage1_n: self.cfg.stage1_n.max(max_k),
            ..selection(&self.cfg)
        };
        let db = self.db()?;
        let mut results = Vec::with_capacity(rows.len());
        for (n, row) in rows.iter().enumerate() {
            let query = Query::new(&index, embedder.as_ref(), &row.buggy, &row.message)?;
            let exclude = if exclude_self {
                row.id.as_deref()
            } else {
                None
            };
            let bundle = search(&index, &query, &params, &db, exclude)?;
            results.push(RankedResult {
                query_id: row.id.clone().unwrap_or_else(|| n.to_string()),
                label: row.label,
                ranked: bundle
                    .code_rag
                    .iter()
                    .map(|e| labels[e.id.as_str()])
                    .collect(),
            });
        }
        let retrieval = evalkit::retrieval_report(&results, ks).map_err(eval_err)?;
        if !retrieval.shallow_at.is_empty() {
            say!(
                self.err,
                "warning: fewer than K results for some queries at K = {:?}",
                retrieval.shallow_at
            );
        }
        let report = EvalReport {
            retrieval: Some(retrieval),
            ..Default::default()
        };
        self.emit(&report, out)
    }
}

fn eval_err(e: evalkit::EvalError) -> CliError {
    CliError::Input(e.to_string())
}

fn print_doc(out: &mut dyn Write, doc: &DocRag) {
    for e in &doc.entries {
        say!(
            out,
            "  {}: {} (root reason: {}; solution: {})",
            e.error_id,
            e.description,
            e.root_reason,
            e.solution
        );
    }
    for c in &doc.unknown_codes {
        say!(out, "  {c}: not in the error database");
    }
}

/// Candidate scripts for problem `stem`: `<stem>.mhdl`, or the sorted
/// `*.mhdl` files of `<stem>/`. A missing prediction counts as one empty
/// (failing) candidate.
fn candidates(pred: &Path, stem: &str) -> Result<Vec<String>, CliError> {
    let file = pred.join(format!("{stem}.mhdl"));
    if file.is_file() {
        return Ok(vec![read_text(&file)?]);
    }
    let dir = pred.join(stem);
    if dir.is_dir() {
        let samples = load_seeds(&dir)?;
        if !samples.is_empty() {
            return Ok(samples.into_iter().map(|s| s.text).collect());
        }
    }
    Ok(vec![String::new()])
}

/// Run with process streams; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    match run(args, &mut out, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
