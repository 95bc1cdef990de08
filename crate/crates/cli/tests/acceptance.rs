//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdldbg_core::evalkit::{hit_at_k, map_at_k, mrr_at_k, RankedResult};
use hdldbg_core::knowledge::{build_doc_rag, ErrorDb};
use hdldbg_core::llm::{FixtureStore, Transport};
use hdldbg_core::minihdl::{
    check, generate_dataset, load_seeds, mutate, revert, CodeInstance, MiniHdlError, MutationOp,
    KEYWORDS,
};
use hdldbg_core::retrieval::{greedy_select, search, MatrixSpace, Query, SelectionParams};
use hdldbg_core::thoughtforge::{
    build_training_set, edit_distance, levenshtein, read_journal, scoring_request, thought_request,
    ForgeParams, TrainingSetup,
};
use hdldbg_core::vectorize::{build_index, fit_tfidf, keyword_vector, HashEmbedder};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    if elapsed > Duration::from_secs(limit_s) {
        return Err(format!(
            "took {:.2}s, limit {limit_s}s",
            elapsed.as_secs_f64()
        ));
    }
    Ok(())
}

// 1. Perfect ranker over synthetic queries.
fn optimal_ranker() -> Outcome {
    let t = Instant::now();
    let labels = MutationOp::ALL;
    let results: Vec<RankedResult<MutationOp>> = (0..120)
        .map(|i| {
            let y = labels[i % labels.len()];
            RankedResult {
                query_id: format!("q{i}"),
                label: y,
                ranked: vec![y; 10],
            }
        })
        .collect();
    let m = |r: Result<hdldbg_core::evalkit::RankMetric, _>| {
        r.map(|m| m.value).map_err(|e| format!("{e:?}"))
    };
    for k in [1, 3, 10] {
        let h = m(hit_at_k(&results, k))?;
        if h != 1.0 {
            return Err(format!("H@{k} = {h}"));
        }
    }
    for k in [3, 10] {
        let v = m(map_at_k(&results, k))?;
        if v != 1.0 {
            return Err(format!("MAP@{k} = {v}"));
        }
    }
    let mrr3 = m(mrr_at_k(&results, 3))?;
    let mrr10 = m(mrr_at_k(&results, 10))?;
    let harmonic = |k: usize| (1..=k).map(|i| 1.0 / i as f64).sum::<f64>() / k as f64;
    if (mrr3 - 0.6111).abs() > 1e-4 || (mrr3 - harmonic(3)).abs() > 1e-9 {
        return Err(format!("MRR@3 = {mrr3}"));
    }
    if (mrr10 - 0.2929).abs() > 1e-4 || (mrr10 - harmonic(10)).abs() > 1e-9 {
        return Err(format!("MRR@10 = {mrr10}"));
    }
    within(t.elapsed(), 1)?;
    Ok(format!(
        "120 queries, MRR@3 = {mrr3:.4}, MRR@10 = {mrr10:.4}, H = MAP = 1"
    ))
}

/// Objective of `set` computed from the raw matrices.
fn oracle_objective(q: &[f64], pair: &[Vec<f64>], set: &[usize], k: usize) -> f64 {
    let rel: f64 = set.iter().map(|&i| q[i]).sum();
    let dis: f64 = set
        .iter()
        .map(|&i| {
            set.iter()
                .filter(|&&j| j != i)
                .map(|&j| 2.0 - pair[i][j])
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
                .unwrap_or(2.0)
        })
        .sum();
    rel + dis / k as f64
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

// 2. Greedy vs exhaustive optimum.
#[allow(clippy::needless_range_loop)]
fn greedy_vs_exhaustive() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let trials = 1000;
    let bound = 1.0 - (-1.0f64).exp();
    let mut exact = 0;
    let mut violations = Vec::new();
    for trial in 0..trials {
        let n = rng.random_range(4..=10);
        let k = rng.random_range(2..=4);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=2.0)).collect();
        let mut pair = vec![vec![2.0; n]; n];
        let mut triples = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let s = rng.random_range(0.0..=2.0);
                pair[i][j] = s;
                pair[j][i] = s;
                triples.push((i, j, s));
            }
        }
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
        let space = MatrixSpace::new(ids, q.clone(), &triples);
        let sel = greedy_select(&space, k);
        let got = oracle_objective(&q, &pair, &sel.picked, k);
        let best = subsets(n, k)
            .iter()
            .map(|s| oracle_objective(&q, &pair, s, k))
            .fold(f64::MIN, f64::max);
        if got < bound * best - 1e-12 {
            violations.push(format!(
                "trial {trial}: n={n} k={k} greedy={got} optimum={best} picked={:?}",
                sel.picked
            ));
        }
        if (got - best).abs() <= 1e-9 {
            exact += 1;
        }
    }
    for v in &violations {
        println!("    violation: {v}");
    }
    let rate = exact as f64 / trials as f64;
    if !violations.is_empty() {
        return Err(format!(
            "{} of {trials} trials below the 1-1/e bound",
            violations.len()
        ));
    }
    if rate < 0.9 {
        return Err(format!(
            "exact optimum in {:.1}% of trials, floor 90%",
            rate * 100.0
        ));
    }
    within(t.elapsed(), 30)?;
    Ok(format!(
        "{trials} trials, no bound violation, exact optimum in {:.1}%",
        rate * 100.0
    ))
}

// 3. Mutation round trip on the shipped seeds.
fn mutation_round_trip() -> Outcome {
    let t = Instant::now();
    let seeds = load_seeds(&root().join("data/seeds")).map_err(|e| e.to_string())?;
    if seeds.len() < 20 {
        return Err(format!("only {} shipped seeds", seeds.len()));
    }
    let (mut applicable, mut skipped) = (0, 0);
    for s in &seeds {
        if !check(&s.text).is_empty() {
            return Err(format!("seed {} fails check", s.path));
        }
        for op in MutationOp::ALL {
            let (mutant, record) = match mutate(s, op, 1) {
                Ok(m) => m,
                Err(MiniHdlError::NotApplicable { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(format!("{} {op}: {e}", s.path)),
            };
            applicable += 1;
            let diags = check(&mutant);
            if !diags.iter().any(|d| d.code == op.error_code()) {
                return Err(format!(
                    "{} {op}: {} missing from {diags:?}",
                    s.path,
                    op.error_code()
                ));
            }
            let back = revert(&mutant, &record).map_err(|e| format!("{} {op}: {e}", s.path))?;
            if back != s.text {
                return Err(format!("{} {op}: revert differs from the seed", s.path));
            }
        }
    }
    within(t.elapsed(), 5)?;
    Ok(format!(
        "{} seeds x 8 ops: {applicable} applicable pairs all round-trip, {skipped} not applicable",
        seeds.len()
    ))
}

// 4. Every instance retrieves itself first.
fn self_retrieval() -> Outcome {
    let t = Instant::now();
    let seeds = load_seeds(&root().join("data/seeds")).map_err(|e| e.to_string())?;
    let data = generate_dataset(&seeds, 1, &MutationOp::ALL, 1)
        .map_err(|e| e.to_string())?
        .instances;
    if data.len() > 200 {
        return Err(format!("{} instances, expected at most 200", data.len()));
    }
    let embedder = HashEmbedder::default();
    let index = build_index(&data, &embedder).map_err(|e| e.to_string())?;
    let db = ErrorDb::shipped();
    let params = SelectionParams::<f32>::default();
    let labels: BTreeMap<&str, MutationOp> =
        data.iter().map(|d| (d.id.as_str(), d.label)).collect();
    let mut results = Vec::new();
    for inst in &data {
        let query =
            Query::new(&index, &embedder, &inst.buggy, &inst.message).map_err(|e| e.to_string())?;
        let bundle = search(&index, &query, &params, &db, None).map_err(|e| e.to_string())?;
        let top = bundle.code_rag.first().ok_or("empty result")?;
        if top.id != inst.id || (f64::from(top.sim) - 2.0).abs() > 1e-6 {
            return Err(format!(
                "{}: rank 1 is {} with sim {}",
                inst.id, top.id, top.sim
            ));
        }
        results.push(RankedResult {
            query_id: inst.id.clone(),
            label: inst.label,
            ranked: bundle
                .code_rag
                .iter()
                .map(|e| labels[e.id.as_str()])
                .collect(),
        });
    }
    let h1 = hit_at_k(&results, 1).map_err(|e| e.to_string())?.value;
    if h1 != 1.0 {
        return Err(format!("H@1 = {h1}"));
    }
    within(t.elapsed(), 10)?;
    Ok(format!(
        "{} instances, all rank themselves first at sim 2, H@1 = 1",
        data.len()
    ))
}

// 5. TF-IDF weights against a brute-force implementation.
fn tfidf_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let idents = ["w_a", "w_b", "clk", "rst", "dout", "sel0", "p_mon", "x"];
    let numbers = ["0", "1", "7", "42"];
    let punct = [";", "=", "(", ")", ",", "+", "&"];
    let mut checked = 0;
    for corpus_no in 0..5 {
        let n_docs = rng.random_range(1..=10);
        let mut docs = Vec::new();
        for _ in 0..n_docs {
            let doc = |len: usize, rng: &mut ChaCha8Rng| {
                (0..len)
                    .map(|_| match rng.random_range(0..4) {
                        0 => *KEYWORDS.choose(rng).unwrap(),
                        1 => *idents.choose(rng).unwrap(),
                        2 => *numbers.choose(rng).unwrap(),
                        _ => *punct.choose(rng).unwrap(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let b = doc(rng.random_range(1..30), &mut rng);
            let m = doc(rng.random_range(0..6), &mut rng);
            docs.push((b, m));
        }
        let is_term = |w: &&str| w.chars().any(|c| c.is_ascii_alphanumeric() || c == '_');
        let terms_of = |(b, m): &(String, String)| -> Vec<String> {
            b.split_whitespace()
                .chain(m.split_whitespace())
                .filter(is_term)
                .map(String::from)
                .collect()
        };
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for d in &docs {
            for t in terms_of(d).into_iter().collect::<BTreeSet<_>>() {
                *df.entry(t).or_default() += 1;
            }
        }
        let model = fit_tfidf(&docs).map_err(|e| e.to_string())?;
        let expected_terms: Vec<&String> = df.keys().collect();
        if model.terms.iter().collect::<Vec<_>>() != expected_terms {
            return Err(format!("corpus {corpus_no}: vocabulary differs"));
        }
        let n = docs.len() as f64;
        for d in &docs {
            let mut tf: BTreeMap<String, f64> = BTreeMap::new();
            for t in terms_of(d) {
                *tf.entry(t).or_default() += 1.0;
            }
            let raw: BTreeMap<String, f64> = tf
                .iter()
                .map(|(t, c)| {
                    (
                        t.clone(),
                        c * (((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0),
                    )
                })
                .collect();
            let norm = raw.values().map(|w| w * w).sum::<f64>().sqrt();
            let got = keyword_vector::<f64>(&model, &d.0, &d.1);
            let got: BTreeMap<String, f64> = got
                .entries
                .iter()
                .map(|&(i, w)| (model.terms[i as usize].clone(), w))
                .collect();
            if got.len() != raw.len() {
                return Err(format!(
                    "corpus {corpus_no}: {} weights, expected {}",
                    got.len(),
                    raw.len()
                ));
            }
            for (t, w) in &raw {
                let want = w / norm;
                let have = got.get(t).copied().unwrap_or(f64::NAN);
                if have.is_nan() || (have - want).abs() > 1e-12 {
                    return Err(format!("corpus {corpus_no}, term {t}: {have} vs {want}"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("5 corpora, {checked} weights within 1e-12"))
}

fn oracle_levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    d[0] = (0..=b.len()).collect();
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

// 6. Edit distance against the full-matrix DP, plus metric axioms.
fn edit_distance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u8> {
        let len = rng.random_range(0..=40);
        (0..len).map(|_| rng.random_range(0..5u8)).collect()
    };
    let text = |s: &[u8]| {
        s.iter()
            .map(|t| format!("t{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for pair in 0..500 {
        let (a, b, c) = (seq(&mut rng), seq(&mut rng), seq(&mut rng));
        let want = oracle_levenshtein(&a, &b);
        let got = levenshtein(&a, &b);
        let via_text = edit_distance(&text(&a), &text(&b));
        if got != want || via_text != want {
            return Err(format!("pair {pair}: {got} / {via_text}, oracle {want}"));
        }
        let (ab, ba, bc, ac) = (
            got,
            levenshtein(&b, &a),
            levenshtein(&b, &c),
            levenshtein(&a, &c),
        );
        if levenshtein(&a, &a) != 0 || ab != ba || ac > ab + bc || (a != b) != (ab > 0) {
            return Err(format!("pair {pair}: metric axiom violated"));
        }
    }
    Ok("500 pairs match the DP oracle; identity, symmetry and triangle inequality hold".into())
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["hdldbg"];
    full.extend_from_slice(args);
    hdldbg_cli::run(full, &mut out, &mut err)
        .map_err(|e| format!("{} failed: {e} (exit {})", args[0], e.exit_code()))?;
    Ok(String::from_utf8(out).expect("utf-8 output"))
}

fn e2e_once(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e");
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let f = |s: &str| fx.join(s).to_string_lossy().into_owned();
    let config = f("config.json");
    let cfg = ["--config", config.as_str()];
    let rng = hdldbg_cli::scripted::E2E_RNG_SEED.to_string();
    let per = hdldbg_cli::scripted::E2E_PER_SEED.to_string();
    let run = |args: &[&str]| {
        let mut v = args.to_vec();
        v.extend_from_slice(&cfg);
        cli(&v)
    };
    run(&[
        "gen",
        "--seeds",
        &f("seeds"),
        "--out",
        &p("data.jsonl"),
        "--per-seed",
        &per,
        "--rng-seed",
        &rng,
    ])?;
    run(&["index", "--dataset", &p("data.jsonl"), "--out", &p("index")])?;
    run(&[
        "thoughts",
        "--dataset",
        &p("data.jsonl"),
        "--index",
        &p("index"),
        "--out",
        &p("journal.jsonl"),
    ])?;
    run(&[
        "export",
        "--dataset",
        &p("data.jsonl"),
        "--index",
        &p("index"),
        "--out",
        &p("sft.jsonl"),
        "--journal",
        &p("journal.jsonl"),
    ])?;
    let report = run(&[
        "debug",
        "--buggy",
        &f("debug/buggy.mhdl"),
        "--errors",
        &f("debug/errors.txt"),
        "--index",
        &p("index"),
        "--out",
        &p("pred/case.mhdl"),
        "--json",
    ])?;
    let eval = run(&["eval", "--pred", &p("pred"), "--refs", &f("debug/refs")])?;
    let mut outputs = BTreeMap::new();
    for name in [
        "data.jsonl",
        "index/index.hdbg",
        "index/meta.json",
        "index/tfidf.json",
        "index/instances.jsonl",
        "journal.jsonl",
        "sft.jsonl",
        "pred/case.mhdl",
    ] {
        outputs.insert(
            name.to_string(),
            fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?,
        );
    }
    outputs.insert("debug report".into(), report.into_bytes());
    outputs.insert("eval report".into(), eval.into_bytes());
    Ok(outputs)
}

// 7. Hermetic end-to-end run, twice.
fn hermetic_e2e() -> Outcome {
    let t = Instant::now();
    let cfg = hdldbg_cli::Config::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e/config.json"),
    )
    .map_err(|e| e.to_string())?;
    if cfg.transport != hdldbg_cli::TransportMode::Replay || cfg.endpoint.is_some() {
        return Err("scenario config is not replay-only".into());
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = e2e_once(a.path())?;
    let second = e2e_once(b.path())?;
    for (name, bytes) in &first {
        if second.get(name) != Some(bytes) {
            return Err(format!("{name} differs between runs"));
        }
    }
    let report: hdldbg_cli::DebugReport =
        serde_json::from_slice(&first["debug report"]).map_err(|e| format!("debug report: {e}"))?;
    let code = String::from_utf8_lossy(&first["pred/case.mhdl"]).into_owned();
    if !report.pass || !check(&code).is_empty() {
        return Err(format!(
            "debug output fails check: {:?}",
            report.diagnostics
        ));
    }
    let eval: serde_json::Value =
        serde_json::from_slice(&first["eval report"]).map_err(|e| e.to_string())?;
    if eval["pass_rate"] != 1.0 {
        return Err(format!("eval pass_rate {}", eval["pass_rate"]));
    }
    within(t.elapsed(), 60)?;
    Ok(format!(
        "gen, index, thoughts, export, debug, eval in replay mode; {} outputs byte-identical over two runs; debug code passes check",
        first.len()
    ))
}

/// Replay fixtures whose repairs sit `distances[j]` token edits from the
/// correct script; returns the journal.
fn journal_for(
    distances: &[usize],
    dir: &Path,
) -> Result<Vec<hdldbg_core::thoughtforge::ThoughtRecord>, String> {
    let seeds = load_seeds(&root().join("data/seeds")).map_err(|e| e.to_string())?;
    let inst: CodeInstance = generate_dataset(&seeds[..1], 1, &[MutationOp::ALL[0]], 3)
        .map_err(|e| e.to_string())?
        .instances
        .remove(0);
    let data = vec![inst.clone()];
    let db = ErrorDb::shipped();
    let doc = build_doc_rag(&inst.message, &db);
    let params = ForgeParams {
        samples: distances.len(),
        ..ForgeParams::default()
    };
    let store = FixtureStore::new(dir.join("llm"));
    for (j, &d) in distances.iter().enumerate() {
        let thought = format!("thought {j}");
        store
            .record_chat(&thought_request(&inst, &doc, j, &params), &thought)
            .map_err(|e| e.to_string())?;
        let predicted = format!("{}\n{}", inst.correct, vec!["extra"; d].join(" "));
        let req = scoring_request(&inst, &doc, &thought, &params).map_err(|e| e.to_string())?;
        store
            .record_chat(&req, &format!("```\n{predicted}\n```"))
            .map_err(|e| e.to_string())?;
    }
    let embedder = HashEmbedder::default();
    let index = build_index::<f32>(&data, &embedder).map_err(|e| e.to_string())?;
    let transport = Transport::replay(dir.join("llm"));
    let journal = dir.join("journal.jsonl");
    let setup = TrainingSetup {
        index: &index,
        embedder: &embedder,
        db: &db,
        transport: &transport,
        selection: SelectionParams::default(),
        forge: params,
        journal: &journal,
    };
    let report = build_training_set(&data, &setup).map_err(|e| e.to_string())?;
    let chosen = report.records.first().ok_or("no training record")?;
    let lines = read_journal(&journal).map_err(|e| e.to_string())?;
    let best = lines
        .iter()
        .min_by_key(|r| (r.distance, r.sample_index))
        .ok_or("empty journal")?;
    if chosen.thought != best.thought {
        return Err(format!(
            "training record uses `{}`, journal minimum is `{}`",
            chosen.thought, best.thought
        ));
    }
    Ok(lines)
}

// 8. Thought selection through the journal.
fn thought_selection() -> Outcome {
    let mut summary = Vec::new();
    for (distances, want) in [(vec![5, 2, 7], 1), (vec![3, 3], 0)] {
        let dir = tempfile::tempdir().unwrap();
        let journal = journal_for(&distances, dir.path())?;
        let got: Vec<usize> = journal.iter().map(|r| r.distance).collect();
        if got != distances {
            return Err(format!("journal distances {got:?}, expected {distances:?}"));
        }
        let best = journal
            .iter()
            .min_by_key(|r| (r.distance, r.sample_index))
            .unwrap();
        if best.sample_index != want {
            return Err(format!(
                "{distances:?} selected sample {}, expected {want}",
                best.sample_index
            ));
        }
        summary.push(format!("{distances:?} -> sample {want}"));
    }
    Ok(summary.join(", "))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("optimal ranker identities", optimal_ranker),
        ("greedy vs exhaustive optimum", greedy_vs_exhaustive),
        ("mutation round trip", mutation_round_trip),
        ("self-retrieval", self_retrieval),
        ("tf-idf oracle", tfidf_oracle),
        ("edit distance oracle", edit_distance_oracle),
        ("hermetic end-to-end", hermetic_e2e),
        ("thought selection", thought_selection),
    ];
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.2}s)", n + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({secs:.2}s)", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
