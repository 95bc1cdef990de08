//! Two-stage ranker over a [`CodeIndex`]: a relevance top-N filter, then
//! greedy selection of k instances balancing relevance against diversity.
//!
//! Similarity of a query `q` and instance `I` is
//! `λ·cos(z^w_q, z^w_I) + (1 − λ)·cos(z^s_q, z^s_I) + 1`, in `[0, 2]`.
//! The selection objective for a set `D` is
//! `Σ sim(q, I) + (1/k)·Σ dis(I, D)` where `dis(I, D)` is the smallest
//! `2 − sim(I, J)` over the other members `J` of `D`, and 2 when `I` is alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::knowledge::{build_doc_rag, DocRag, ErrorDb};
use crate::vectorize::{
    cosine_dense, cosine_sparse, CodeIndex, DenseVec, Embedder, HybridVec, SparseVec, VectorIndex,
    VectorizeError,
};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid selection parameters: {0}")]
    InvalidParams(String),
    #[error("instance {0} is not a member of the selected set")]
    NotMember(usize),
    #[error("the objective is undefined for an empty set")]
    EmptySet,
    #[error("candidate {index} out of range for {len} candidates")]
    OutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Vectorize(#[from] VectorizeError),
}

type Result<T, E = RetrievalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams<T> {
    pub lambda: T,
    pub stage1_n: usize,
    pub k: usize,
}

impl<T: Scalar> Default for SelectionParams<T> {
    fn default() -> Self {
        SelectionParams {
            lambda: T::of(0.5),
            stage1_n: 50,
            k: 5,
        }
    }
}

impl<T: Scalar> SelectionParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= T::zero() && self.lambda <= T::one()) {
            return Err(RetrievalError::InvalidParams(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.stage1_n == 0 || self.k == 0 {
            return Err(RetrievalError::InvalidParams(
                "stage1_n and k must be positive".into(),
            ));
        }
        if self.k > self.stage1_n {
            return Err(RetrievalError::InvalidParams(format!(
                "k ({}) must not exceed stage1_n ({})",
                self.k, self.stage1_n
            )));
        }
        Ok(())
    }
}

fn sim_parts<T: Scalar>(
    kw_a: &SparseVec<T>,
    sem_a: &DenseVec<T>,
    kw_b: &SparseVec<T>,
    sem_b: &DenseVec<T>,
    lambda: T,
) -> Result<T> {
    let cw = cosine_sparse(kw_a, kw_b)?;
    let cs = cosine_dense(sem_a, sem_b)?;
    Ok(lambda * cw + (T::one() - lambda) * cs + T::one())
}

pub fn similarity<T: Scalar>(
    query: &HybridVec<T>,
    instance: &HybridVec<T>,
    lambda: T,
) -> Result<T> {
    sim_parts(
        &query.keyword,
        &query.semantic,
        &instance.keyword,
        &instance.semantic,
        lambda,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance<T> {
    pub id: String,
    /// Position in the index.
    pub index: usize,
    pub sim: T,
    pub rank: usize,
}

/// The `n` instances most similar to the query, best first, ties by
/// ascending id. `exclude` drops one instance id from consideration.
pub fn stage1_topn<T: Scalar>(
    index: &VectorIndex<T>,
    query: &HybridVec<T>,
    lambda: T,
    n: usize,
    exclude: Option<&str>,
) -> Result<Vec<ScoredInstance<T>>> {
    let sims: Vec<T> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            sim_parts(
                &query.keyword,
                &query.semantic,
                &index.keyword[i],
                &index.semantic[i],
                lambda,
            )
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..index.len())
        .filter(|&i| exclude != Some(index.ids[i].as_str()))
        .collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    order.truncate(n);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| ScoredInstance {
            id: index.ids[i].clone(),
            index: i,
            sim: sims[i],
            rank,
        })
        .collect())
}

/// Candidates for stage 2: their similarity to the query and to each other.
pub trait CandidateSpace<T: Scalar> {
    fn len(&self) -> usize;
    fn id(&self, i: usize) -> &str;
    fn query_sim(&self, i: usize) -> T;
    /// Must be symmetric.
    fn pair_sim(&self, i: usize, j: usize) -> T;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Explicit similarity values, for callers that already have them.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSpace<T> {
    pub ids: Vec<String>,
    pub query_sims: Vec<T>,
    /// Row-major `len × len`.
    pub pair_sims: Vec<T>,
}

impl<T: Scalar> MatrixSpace<T> {
    /// `pairs` lists `(i, j, sim)` once per unordered pair; missing pairs
    /// default to 1 (orthogonal) and the diagonal to 2.
    pub fn new(ids: Vec<String>, query_sims: Vec<T>, pairs: &[(usize, usize, T)]) -> Self {
        let n = ids.len();
        let mut pair_sims = vec![T::one(); n * n];
        for i in 0..n {
            pair_sims[i * n + i] = T::two();
        }
        for &(i, j, s) in pairs {
            pair_sims[i * n + j] = s;
            pair_sims[j * n + i] = s;
        }
        MatrixSpace {
            ids,
            query_sims,
            pair_sims,
        }
    }
}

impl<T: Scalar> CandidateSpace<T> for MatrixSpace<T> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    fn query_sim(&self, i: usize) -> T {
        self.query_sims[i]
    }

    fn pair_sim(&self, i: usize, j: usize) -> T {
        self.pair_sims[i * self.ids.len() + j]
    }
}

/// Stage-1 output over an index; pair similarities are computed on demand.
pub struct IndexSpace<'a, T> {
    pub index: &'a VectorIndex<T>,
    pub candidates: &'a [ScoredInstance<T>],
    pub lambda: T,
}

impl<T: Scalar> CandidateSpace<T> for IndexSpace<'_, T> {
    fn len(&self) -> usize {
        self.candidates.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.candidates[i].id
    }

    fn query_sim(&self, i: usize) -> T {
        self.candidates[i].sim
    }

    fn pair_sim(&self, i: usize, j: usize) -> T {
        let (a, b) = (self.candidates[i].index, self.candidates[j].index);
        let ix = self.index;
        // dimensions agree within one index
        sim_parts(
            &ix.keyword[a],
            &ix.semantic[a],
            &ix.keyword[b],
            &ix.semantic[b],
            self.lambda,
        )
        .unwrap_or_else(|_| T::one())
    }
}

/// `dis(I_member, set)`; `member` and `set` hold candidate positions.
pub fn set_distance<T: Scalar>(
    space: &dyn CandidateSpace<T>,
    member: usize,
    set: &[usize],
) -> Result<T> {
    check_range(space, set)?;
    let at = set
        .iter()
        .position(|&x| x == member)
        .ok_or(RetrievalError::NotMember(member))?;
    Ok(set
        .iter()
        .enumerate()
        .filter(|&(p, _)| p != at)
        .map(|(_, &j)| T::two() - space.pair_sim(member, j))
        .fold(T::two(), T::min))
}

fn check_range<T: Scalar>(space: &dyn CandidateSpace<T>, set: &[usize]) -> Result<()> {
    match set.iter().find(|&&i| i >= space.len()) {
        Some(&index) => Err(RetrievalError::OutOfRange {
            index,
            len: space.len(),
        }),
        None => Ok(()),
    }
}

pub fn objective<T: Scalar>(space: &dyn CandidateSpace<T>, set: &[usize], k: usize) -> Result<T> {
    if set.is_empty() {
        return Err(RetrievalError::EmptySet);
    }
    if k == 0 {
        return Err(RetrievalError::InvalidParams("k must be positive".into()));
    }
    check_range(space, set)?;
    let relevance: T = set.iter().map(|&i| space.query_sim(i)).sum();
    let mut diversity = T::zero();
    for &i in set {
        diversity = diversity + set_distance(space, i, set)?;
    }
    Ok(relevance + diversity / T::of_usize(k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    /// Candidate positions in pick order.
    pub picked: Vec<usize>,
    pub objective: T,
    /// Fewer candidates than `k` were available.
    pub clamped: bool,
}

/// Greedy maximization of the objective. Each step evaluates
/// `S(D ∪ {j}) − S(D)` by recomputing `S` in full, since adding `j` can
/// lower the distance terms of members already in `D`.
pub fn greedy_select<T: Scalar>(space: &dyn CandidateSpace<T>, k: usize) -> Selection<T> {
    let n = space.len();
    let k_eff = k.min(n);
    let clamped = k > n;
    if k_eff == 0 {
        return Selection {
            picked: Vec::new(),
            objective: T::zero(),
            clamped,
        };
    }
    let inv_k = T::one() / T::of_usize(k_eff);
    let mut picked: Vec<usize> = Vec::with_capacity(k_eff);
    let mut taken = vec![false; n];
    // sims[s][j] = pair_sim(j, picked[s]) for every candidate j
    let mut sims: Vec<Vec<T>> = Vec::with_capacity(k_eff);
    let mut current = T::zero();

    for _ in 0..k_eff {
        let mut best: Option<(usize, T, T)> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            let s = objective_with(space, &picked, &sims, j, inv_k);
            let gain = s - current;
            let better = match best {
                None => true,
                Some((b, g, _)) => gain > g || (gain == g && space.id(j) < space.id(b)),
            };
            if better {
                best = Some((j, gain, s));
            }
        }
        let (j, _, s) = best.expect("k_eff <= untaken candidates");
        taken[j] = true;
        picked.push(j);
        sims.push((0..n).map(|x| space.pair_sim(x, j)).collect());
        current = s;
    }
    Selection {
        picked,
        objective: current,
        clamped,
    }
}

/// `S(D ∪ {extra})` from cached similarities.
fn objective_with<T: Scalar>(
    space: &dyn CandidateSpace<T>,
    picked: &[usize],
    sims: &[Vec<T>],
    extra: usize,
    inv_k: T,
) -> T {
    let mut relevance = space.query_sim(extra);
    let mut diversity = T::zero();
    let mut extra_dis = T::two();
    for (s, &p) in picked.iter().enumerate() {
        relevance = relevance + space.query_sim(p);
        let with_extra = T::two() - sims[s][extra];
        extra_dis = extra_dis.min(with_extra);
        let mut dis = with_extra;
        for (t, _) in picked.iter().enumerate().filter(|&(t, _)| t != s) {
            dis = dis.min(T::two() - sims[t][p]);
        }
        diversity = diversity + dis;
    }
    relevance + (diversity + extra_dis) * inv_k
}

/// One code-context exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeRagEntry<T> {
    pub id: String,
    pub sim: T,
    pub buggy: String,
    pub message: String,
    pub correct: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RagBundle<T> {
    pub doc_rag: DocRag,
    pub code_rag: Vec<CodeRagEntry<T>>,
    pub params: SelectionParams<T>,
    /// Fewer than `k` instances were available.
    #[serde(default)]
    pub clamped: bool,
}

/// A query and its vectors, computed with the index's TF-IDF model.
#[derive(Debug, Clone, PartialEq)]
pub struct Query<T> {
    pub buggy: String,
    pub message: String,
    pub vectors: HybridVec<T>,
}

impl<T: Scalar> Query<T> {
    pub fn new(
        index: &CodeIndex<T>,
        embedder: &dyn Embedder<T>,
        buggy: &str,
        message: &str,
    ) -> Result<Self> {
        Ok(Query {
            buggy: buggy.to_string(),
            message: message.to_string(),
            vectors: index.query_vectors(buggy, message, embedder)?,
        })
    }
}

/// Document context for the message plus code context from the two-stage
/// ranker. `exclude` keeps one instance id out of the code context.
pub fn search<T: Scalar>(
    index: &CodeIndex<T>,
    query: &Query<T>,
    params: &SelectionParams<T>,
    db: &ErrorDb,
    exclude: Option<&str>,
) -> Result<RagBundle<T>> {
    params.validate()?;
    let doc_rag = build_doc_rag(&query.message, db);
    let candidates = stage1_topn(
        &index.vectors,
        &query.vectors,
        params.lambda,
        params.stage1_n,
        exclude,
    )?;
    let space = IndexSpace {
        index: &index.vectors,
        candidates: &candidates,
        lambda: params.lambda,
    };
    let selection = greedy_select(&space, params.k);
    let code_rag = selection
        .picked
        .iter()
        .map(|&c| {
            let cand = &candidates[c];
            let inst = &index.instances[cand.index];
            CodeRagEntry {
                id: cand.id.clone(),
                sim: cand.sim,
                buggy: inst.buggy.clone(),
                message: inst.message.clone(),
                correct: inst.correct.clone(),
            }
        })
        .collect();
    Ok(RagBundle {
        doc_rag,
        code_rag,
        params: *params,
        clamped: selection.clamped,
    })
}
