//! A deterministic stand-in for the chat service, used to record the replay
//! fixtures behind the hermetic end-to-end scenario.
//!
//! Thought sample `j` names the mutation that produced the instance. When
//! scoring, one target sample per instance yields the correct script and the
//! others echo the buggy one, so selection has a unique winner.

use std::fs;
use std::path::Path;

use serde_json::json;

use hdldbg_core::knowledge::{build_doc_rag, ErrorDb};
use hdldbg_core::llm::FixtureStore;
use hdldbg_core::minihdl::{generate_dataset, load_seeds, write_jsonl, CodeInstance, MutationOp};
use hdldbg_core::retrieval::{search, Query};
use hdldbg_core::thoughtforge::{scoring_request, thought_request, ForgeParams};
use hdldbg_core::vectorize::{build_index, HashEmbedder};

use crate::{
    analysis_request, forge_params, repair_request, selection, single_call_request, CliError,
    Config,
};

/// Flags used by the scenario's `gen` step.
pub const E2E_PER_SEED: usize = 1;
pub const E2E_RNG_SEED: u64 = 11;
/// Thoughts per instance in the scenario config.
pub const E2E_THOUGHTS: usize = 2;
/// Seed of the held-out mutation used as the `debug` case.
pub const E2E_DEBUG_RNG_SEED: u64 = 4242;
pub const E2E_DEBUG_OP: MutationOp = MutationOp::ALL[5];

pub fn scripted_thought(inst: &CodeInstance, j: usize) -> String {
    let r = &inst.record;
    format!(
        "Sample {j}. The checker reports {}. The fault comes from a {} edit at bytes {}..{}: \
         `{}` was replaced by `{}`. Restoring `{}` there fixes the script.",
        inst.label.error_code(),
        inst.label.id(),
        r.site.start,
        r.site.end,
        r.original_text.trim(),
        r.replacement_text.trim(),
        r.original_text.trim(),
    )
}

/// The sample whose repair is correct.
pub fn target_sample(inst: &CodeInstance, samples: usize) -> usize {
    inst.id.bytes().map(usize::from).sum::<usize>() % samples.max(1)
}

fn fenced(code: &str) -> String {
    format!("```\n{}\n```", code.trim_end())
}

/// Record thought and scoring replies for every instance; returns the
/// number of requests covered.
pub fn record_training(
    store: &FixtureStore,
    data: &[CodeInstance],
    db: &ErrorDb,
    p: &ForgeParams,
) -> Result<usize, CliError> {
    let mut n = 0;
    for inst in data {
        let doc = build_doc_rag(&inst.message, db);
        let target = target_sample(inst, p.samples);
        for j in 0..p.samples {
            let thought = scripted_thought(inst, j);
            store.record_chat(&thought_request(inst, &doc, j, p), &thought)?;
            let reply = if j == target {
                &inst.correct
            } else {
                &inst.buggy
            };
            let scoring = scoring_request(inst, &doc, &thought, p)?;
            store.record_chat(
                &scoring,
                &format!("Based on the analysis:\n\n{}", fenced(reply)),
            )?;
            n += 2;
        }
    }
    Ok(n)
}

/// Record the two-turn and single-call replies of the `debug` case.
pub fn record_debug(
    store: &FixtureStore,
    cfg: &Config,
    data: &[CodeInstance],
    case: &CodeInstance,
    db: &ErrorDb,
) -> Result<(), CliError> {
    let embedder = HashEmbedder { dim: cfg.dense_dim };
    let index = build_index(data, &embedder)?;
    let query = Query::new(&index, &embedder, &case.buggy, &case.message)?;
    let bundle = search(&index, &query, &selection(cfg), db, None)?;
    let nearest = bundle.code_rag.first().map_or("none", |e| e.id.as_str());
    let thought = format!(
        "{} Closest indexed case: {nearest}.",
        scripted_thought(case, 0)
    );
    store.record_chat(
        &analysis_request(cfg, &case.buggy, &case.message, &bundle),
        &thought,
    )?;
    let repair = repair_request(cfg, &case.buggy, &case.message, &bundle, &thought)?;
    store.record_chat(&repair, &fenced(&case.correct))?;
    let single = single_call_request(cfg, &case.buggy, &case.message, &bundle);
    store.record_chat(
        &single,
        &format!(
            "{thought}\n\n{}\n{}",
            hdldbg_core::llm::CORRECT_CUE,
            fenced(&case.correct)
        ),
    )?;
    Ok(())
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

/// Write the scenario into `out`: `seeds/`, `config.json`, `llm/` and
/// `debug/{buggy.mhdl, errors.txt, refs/case.mhdl}`. `seeds` is copied.
pub fn record_e2e(seeds: &Path, out: &Path) -> Result<usize, CliError> {
    let files = load_seeds(seeds)?;
    let seed_dir = out.join("seeds");
    fs::create_dir_all(&seed_dir).map_err(io(&seed_dir))?;
    for f in &files {
        let name = Path::new(&f.path)
            .file_name()
            .expect("seed files have names");
        fs::write(seed_dir.join(name), &f.text).map_err(io(&seed_dir))?;
    }

    let cfg_json = json!({ "transport": "replay", "fixtures": "llm", "thoughts_l": E2E_THOUGHTS });
    let cfg_path = out.join("config.json");
    fs::write(
        &cfg_path,
        format!(
            "{}\n",
            serde_json::to_string_pretty(&cfg_json).expect("json")
        ),
    )
    .map_err(io(&cfg_path))?;
    let cfg = Config::load(&cfg_path)?;

    let data = generate_dataset(&files, E2E_PER_SEED, &MutationOp::ALL, E2E_RNG_SEED)?.instances;
    let held_out = generate_dataset(&files[..1], 1, &[E2E_DEBUG_OP], E2E_DEBUG_RNG_SEED)?.instances;
    let case = held_out
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Input("debug op does not apply to the first seed".into()))?;

    let llm_dir = out.join("llm");
    if llm_dir.exists() {
        fs::remove_dir_all(&llm_dir).map_err(io(&llm_dir))?;
    }
    let store = FixtureStore::new(&llm_dir);
    let db = ErrorDb::shipped();
    let n = record_training(&store, &data, &db, &forge_params(&cfg))?;
    record_debug(&store, &cfg, &data, &case, &db)?;

    let debug = out.join("debug");
    let refs = debug.join("refs");
    fs::create_dir_all(&refs).map_err(io(&refs))?;
    fs::write(debug.join("buggy.mhdl"), &case.buggy).map_err(io(&debug))?;
    fs::write(debug.join("errors.txt"), &case.message).map_err(io(&debug))?;
    fs::write(refs.join("case.mhdl"), &case.correct).map_err(io(&refs))?;
    write_jsonl(&debug.join("instance.jsonl"), std::slice::from_ref(&case))?;
    Ok(n + 3)
}
