//! Repair and retrieval metrics.
//!
//! The ranking metrics follow the averaged form: for each query,
//!
//! * `H@K   = (1/K) Σ_k hit_k`
//! * `MAP@K = (1/K) Σ_k hit_k · hits(≤k) / k`
//! * `MRR@K = (1/K) Σ_k hit_k / k`
//!
//! averaged over queries. A perfect ranker therefore scores `H@K = MAP@K = 1`
//! and `MRR@K = H_K / K` where `H_K` is the K-th harmonic number.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minihdl::{check, significant_texts};
use crate::thoughtforge::levenshtein;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no inputs to evaluate")]
    Empty,
    #[error("K must be positive")]
    ZeroK,
    #[error("problem {id} has {available} samples, fewer than k = {k}")]
    TooFewSamples {
        id: String,
        available: usize,
        k: usize,
    },
    #[error("baseline runtime must be positive")]
    NonPositiveBaseline,
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult<L> {
    pub query_id: String,
    pub label: L,
    /// Labels of the retrieved instances, best first.
    pub ranked: Vec<L>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetric {
    pub value: f64,
    /// Some query had fewer than K results and was scored at its own depth.
    pub shallow: bool,
}

fn rank_metric<L: PartialEq>(
    results: &[RankedResult<L>],
    k: usize,
    per_rank: impl Fn(usize, usize) -> f64,
) -> Result<RankMetric> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut shallow = false;
    let mut total = 0.0;
    for r in results {
        let depth = k.min(r.ranked.len());
        shallow |= depth < k;
        if depth == 0 {
            continue;
        }
        let mut hits = 0;
        let mut sum = 0.0;
        for (i, l) in r.ranked[..depth].iter().enumerate() {
            if *l == r.label {
                hits += 1;
                sum += per_rank(i + 1, hits);
            }
        }
        total += sum / depth as f64;
    }
    Ok(RankMetric {
        value: total / results.len() as f64,
        shallow,
    })
}

pub fn hit_at_k<L: PartialEq>(results: &[RankedResult<L>], k: usize) -> Result<RankMetric> {
    rank_metric(results, k, |_, _| 1.0)
}

pub fn map_at_k<L: PartialEq>(results: &[RankedResult<L>], k: usize) -> Result<RankMetric> {
    rank_metric(results, k, |rank, hits| hits as f64 / rank as f64)
}

pub fn mrr_at_k<L: PartialEq>(results: &[RankedResult<L>], k: usize) -> Result<RankMetric> {
    rank_metric(results, k, |rank, _| 1.0 / rank as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairOutcome {
    pub problem_id: String,
    /// Per sample: did the candidate pass the checker.
    pub passes: Vec<bool>,
}

impl RepairOutcome {
    pub fn from_candidates<S: AsRef<str>>(problem_id: impl Into<String>, candidates: &[S]) -> Self {
        RepairOutcome {
            problem_id: problem_id.into(),
            passes: candidates
                .iter()
                .map(|c| check(c.as_ref()).is_empty())
                .collect(),
        }
    }
}

/// Fraction of problems whose first candidate passes.
pub fn pass_rate(outcomes: &[RepairOutcome]) -> Result<f64> {
    pass_at_k(outcomes, 1)
}

/// Fraction of problems where one of the first `k` samples passes.
pub fn pass_at_k(outcomes: &[RepairOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut passed = 0usize;
    for o in outcomes {
        if o.passes.len() < k {
            return Err(EvalError::TooFewSamples {
                id: o.problem_id.clone(),
                available: o.passes.len(),
                k,
            });
        }
        passed += usize::from(o.passes[..k].iter().any(|&p| p));
    }
    Ok(passed as f64 / outcomes.len() as f64)
}

pub fn relative_runtime(times: &[f64], baseline: f64) -> Result<f64> {
    if baseline <= 0.0 || baseline.is_nan() {
        return Err(EvalError::NonPositiveBaseline);
    }
    if times.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(times.iter().sum::<f64>() / times.len() as f64 / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub raw: f64,
    pub normalized: f64,
}

/// Mean token edit distance, raw and divided by the longer token count.
pub fn edit_distance_report<A: AsRef<str>, B: AsRef<str>>(pairs: &[(A, B)]) -> Result<EditReport> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut raw, mut norm) = (0.0, 0.0);
    for (a, b) in pairs {
        let ta = significant_texts(a.as_ref());
        let tb = significant_texts(b.as_ref());
        let d = levenshtein(&ta, &tb) as f64;
        let longest = ta.len().max(tb.len());
        raw += d;
        if longest > 0 {
            norm += d / longest as f64;
        }
    }
    let n = pairs.len() as f64;
    Ok(EditReport {
        raw: raw / n,
        normalized: norm / n,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "H")]
    pub hit: BTreeMap<String, f64>,
    #[serde(rename = "MAP")]
    pub map: BTreeMap<String, f64>,
    #[serde(rename = "MRR")]
    pub mrr: BTreeMap<String, f64>,
    /// K values at which some query had fewer than K results.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shallow_at: Vec<usize>,
}

pub fn retrieval_report<L: PartialEq>(
    results: &[RankedResult<L>],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut rep = RetrievalReport::default();
    for &k in ks {
        let h = hit_at_k(results, k)?;
        let m = map_at_k(results, k)?;
        let r = mrr_at_k(results, k)?;
        rep.hit.insert(k.to_string(), h.value);
        rep.map.insert(k.to_string(), m.value);
        rep.mrr.insert(k.to_string(), r.value);
        if h.shallow {
            rep.shallow_at.push(k);
        }
    }
    Ok(rep)
}

/// The JSON evaluation report; sections not computed are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub pass_at_k: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_runtime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edit_distance: Option<EditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rr(label: u8, ranked: &[u8]) -> RankedResult<u8> {
        RankedResult {
            query_id: String::new(),
            label,
            ranked: ranked.to_vec(),
        }
    }

    #[test]
    fn ranking_examples() {
        let one = [rr(1, &[1, 0, 1])];
        assert!((hit_at_k(&one, 3).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
        assert!((map_at_k(&one, 3).unwrap().value - 0.5556).abs() < 1e-4);
        let none = [rr(1, &[0, 0, 0])];
        assert_eq!(hit_at_k(&none, 3).unwrap().value, 0.0);
        assert_eq!(map_at_k(&none, 3).unwrap().value, 0.0);
        assert_eq!(mrr_at_k(&none, 3).unwrap().value, 0.0);
        assert_eq!(hit_at_k::<u8>(&[], 3), Err(EvalError::Empty));
    }

    #[test]
    fn perfect_ranker() {
        let perfect: Vec<_> = (0..100)
            .map(|i| rr(i as u8 % 8, &[i as u8 % 8; 10]))
            .collect();
        for k in [1, 3, 10] {
            assert_eq!(hit_at_k(&perfect, k).unwrap().value, 1.0);
        }
        assert_eq!(map_at_k(&perfect, 3).unwrap().value, 1.0);
        assert_eq!(map_at_k(&perfect, 10).unwrap().value, 1.0);
        let m3 = mrr_at_k(&perfect, 3).unwrap().value;
        let m10 = mrr_at_k(&perfect, 10).unwrap().value;
        assert!((m3 - 0.6111).abs() < 1e-4);
        assert!((m10 - 0.2929).abs() < 1e-4);
        assert_eq!(format!("{m3:.2}"), "0.61");
        assert_eq!(format!("{m10:.2}"), "0.29");
    }

    #[test]
    fn shallow_results_flagged() {
        let r = [rr(1, &[1, 1])];
        let h = hit_at_k(&r, 5).unwrap();
        assert!(h.shallow);
        assert_eq!(h.value, 1.0);
        assert!(!hit_at_k(&r, 2).unwrap().shallow);
    }

    fn outcome(passes: &[bool]) -> RepairOutcome {
        RepairOutcome {
            problem_id: "p".into(),
            passes: passes.to_vec(),
        }
    }

    #[test]
    fn pass_metrics() {
        let four = [
            outcome(&[true]),
            outcome(&[false]),
            outcome(&[true]),
            outcome(&[false]),
        ];
        assert_eq!(pass_rate(&four).unwrap(), 0.5);
        assert_eq!(pass_rate(&[outcome(&[true])]).unwrap(), 1.0);
        assert_eq!(pass_rate(&[outcome(&[false])]).unwrap(), 0.0);
        let late = [outcome(&[false, false, true, false])];
        assert_eq!(pass_at_k(&late, 2).unwrap(), 0.0);
        assert_eq!(pass_at_k(&late, 3).unwrap(), 1.0);
        assert!(matches!(
            pass_at_k(&late, 5),
            Err(EvalError::TooFewSamples { .. })
        ));
        let passing = RepairOutcome::from_candidates("x", &["module m (); endmodule", "junk"]);
        assert_eq!(passing.passes, vec![true, false]);
    }

    #[test]
    fn runtime_and_edit() {
        assert_eq!(relative_runtime(&[2.0, 2.0], 2.0).unwrap(), 1.0);
        assert_eq!(relative_runtime(&[3.0, 5.0], 2.0).unwrap(), 2.0);
        assert_eq!(relative_runtime(&[], 1.0), Err(EvalError::Empty));
        assert_eq!(
            relative_runtime(&[1.0], 0.0),
            Err(EvalError::NonPositiveBaseline)
        );
        let same = edit_distance_report(&[("wire a;", "wire a;")]).unwrap();
        assert_eq!((same.raw, same.normalized), (0.0, 0.0));
        // 10 tokens vs 7: three deletions
        let r = edit_distance_report(&[("a b c d e f g h i j", "a b c d e f g")]).unwrap();
        assert_eq!((r.raw, r.normalized), (3.0, 0.3));
    }

    #[test]
    fn report_json_shape() {
        let rep = EvalReport {
            pass_rate: Some(1.0),
            retrieval: Some(retrieval_report(&[rr(1, &[1, 1, 1])], &[1, 3]).unwrap()),
            ..Default::default()
        };
        let v = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["retrieval"]["MRR"]["1"], 1.0);
        assert!(v.get("relative_runtime").is_none());
    }

    proptest! {
        #[test]
        fn metric_properties(
            rows in proptest::collection::vec((0u8..3, proptest::collection::vec(0u8..3, 0..12)), 1..20),
            k in 1usize..12,
            rot in 0usize..20,
        ) {
            let results: Vec<_> = rows.iter().map(|(l, r)| rr(*l, r)).collect();
            let mut rotated = results.clone();
            rotated.rotate_left(rot % results.len());
            for f in [hit_at_k::<u8>, map_at_k::<u8>, mrr_at_k::<u8>] {
                let v = f(&results, k).unwrap().value;
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                prop_assert!((v - f(&rotated, k).unwrap().value).abs() < 1e-12);
            }
            let outs: Vec<_> = rows.iter().map(|(_, r)| outcome(&r.iter().map(|x| *x == 0).collect::<Vec<_>>())).collect();
            let depth = outs.iter().map(|o| o.passes.len()).min().unwrap();
            let mut prev = 0.0;
            for kk in 1..=depth {
                let v = pass_at_k(&outs, kk).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }
    }
}
