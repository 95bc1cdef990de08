//! Keyword (TF-IDF) and semantic vectors for buggy instances, and the
//! persisted vector index.
//!
//! Index directory layout:
//!
//! * `index.hdbg`: binary vectors (see [`encode_index`])
//! * `meta.json`: instance ids, labels and embedder fingerprint
//! * `tfidf.json`: the fitted TF-IDF model, needed to vectorize queries
//! * `instances.jsonl`: the indexed instances, returned as code context

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmError, Transport};
use crate::minihdl::{self, read_jsonl, write_jsonl, CodeInstance, MutationOp, TokenKind};
use crate::Scalar;

pub const INDEX_MAGIC: &[u8; 4] = b"HDBG";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_DENSE_DIM: usize = 256;
pub const DEFAULT_CHUNK_TOKENS: usize = 256;
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum VectorizeError {
    #[error("cannot fit TF-IDF on an empty corpus")]
    EmptyCorpus,
    #[error("cannot build an index from zero instances")]
    EmptyIndex,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedder fingerprint mismatch: index has `{index}`, embedder is `{embedder}`")]
    Fingerprint { index: String, embedder: String },
    #[error("malformed index file: {0}")]
    Format(String),
    #[error("index checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("{0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Dataset(#[from] minihdl::MiniHdlError),
    #[error(transparent)]
    Transport(#[from] LlmError),
}

type Result<T, E = VectorizeError> = std::result::Result<T, E>;

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec<T> {
    pub dim: usize,
    pub entries: Vec<(u32, T)>,
}

impl<T: Scalar> SparseVec<T> {
    pub fn zero(dim: usize) -> Self {
        SparseVec {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn norm(&self) -> T {
        self.entries.iter().map(|&(_, w)| w * w).sum::<T>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        let (mut i, mut j) = (0, 0);
        let mut acc = T::zero();
        while i < self.entries.len() && j < other.entries.len() {
            let (a, wa) = self.entries[i];
            let (b, wb) = other.entries[j];
            match a.cmp(&b) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc = acc + wa * wb;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn cast<U: Scalar>(&self) -> SparseVec<U> {
        SparseVec {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|&(i, w)| (i, U::of(w.as_f64())))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVec<T>(pub Vec<T>);

impl<T: Scalar> DenseVec<T> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    /// Scale to unit length; the zero vector stays zero.
    pub fn normalized(mut self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            for x in &mut self.0 {
                *x = *x / n;
            }
        }
        self
    }

    pub fn cast<U: Scalar>(&self) -> DenseVec<U> {
        DenseVec(self.0.iter().map(|&x| U::of(x.as_f64())).collect())
    }
}

/// Keyword and semantic vector of one instance or query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridVec<T> {
    pub keyword: SparseVec<T>,
    pub semantic: DenseVec<T>,
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either side is zero.
pub fn cosine_sparse<T: Scalar>(a: &SparseVec<T>, b: &SparseVec<T>) -> Result<T> {
    if a.dim != b.dim {
        return Err(VectorizeError::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    Ok(cosine_from(a.dot(b), a.norm(), b.norm()))
}

pub fn cosine_dense<T: Scalar>(a: &DenseVec<T>, b: &DenseVec<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(VectorizeError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(cosine_from(a.dot(b), a.norm(), b.norm()))
}

fn cosine_from<T: Scalar>(dot: T, na: T, nb: T) -> T {
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    (dot / (na * nb)).max(-T::one()).min(T::one())
}

/// Terms of a `(buggy, message)` document: keywords, identifiers and
/// numbers, case-sensitive.
pub fn document_terms<'a>(buggy: &'a str, message: &'a str) -> Vec<&'a str> {
    [buggy, message]
        .into_iter()
        .flat_map(minihdl::tokenize)
        .filter(|t| {
            matches!(
                t.kind,
                TokenKind::Keyword | TokenKind::Identifier | TokenKind::Number
            )
        })
        .map(|t| t.text)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TfidfModel {
    /// Terms in lexicographic order; a term's position is its index.
    pub terms: Vec<String>,
    /// Document frequency, aligned with `terms`.
    pub df: Vec<u32>,
    pub n_docs: u32,
}

impl TfidfModel {
    pub fn vocab_size(&self) -> usize {
        self.terms.len()
    }

    pub fn index_of(&self, term: &str) -> Option<u32> {
        self.terms
            .binary_search_by(|t| t.as_str().cmp(term))
            .ok()
            .map(|i| i as u32)
    }

    pub fn df_of(&self, term: &str) -> Option<u32> {
        self.index_of(term).map(|i| self.df[i as usize])
    }

    /// `ln((1 + N) / (1 + df)) + 1`
    pub fn idf<T: Scalar>(&self, index: u32) -> T {
        let n = T::of_usize(self.n_docs as usize);
        let df = T::of_usize(self.df[index as usize] as usize);
        ((T::one() + n) / (T::one() + df)).ln() + T::one()
    }
}

pub fn fit_tfidf<B: AsRef<str>, M: AsRef<str>>(corpus: &[(B, M)]) -> Result<TfidfModel> {
    if corpus.is_empty() {
        return Err(VectorizeError::EmptyCorpus);
    }
    let mut df: BTreeMap<&str, u32> = BTreeMap::new();
    for (b, m) in corpus {
        let mut terms = document_terms(b.as_ref(), m.as_ref());
        terms.sort_unstable();
        terms.dedup();
        for t in terms {
            *df.entry(t).or_default() += 1;
        }
    }
    let (terms, df) = df.into_iter().map(|(t, n)| (t.to_string(), n)).unzip();
    Ok(TfidfModel {
        terms,
        df,
        n_docs: corpus.len() as u32,
    })
}

/// Raw-count TF times smoothed IDF, L2-normalized. Out-of-vocabulary terms
/// are ignored.
pub fn keyword_vector<T: Scalar>(model: &TfidfModel, buggy: &str, message: &str) -> SparseVec<T> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for term in document_terms(buggy, message) {
        if let Some(i) = model.index_of(term) {
            *counts.entry(i).or_default() += 1;
        }
    }
    let mut entries: Vec<(u32, T)> = counts
        .into_iter()
        .map(|(i, tf)| (i, T::of_usize(tf) * model.idf::<T>(i)))
        .collect();
    let norm = entries.iter().map(|&(_, w)| w * w).sum::<T>().sqrt();
    if norm > T::zero() {
        for (_, w) in &mut entries {
            *w = *w / norm;
        }
    }
    SparseVec {
        dim: model.vocab_size(),
        entries,
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Character-trigram feature hashing with signed buckets.
pub fn hash_embed_text<T: Scalar>(text: &str, dim: usize) -> DenseVec<T> {
    let mut acc = vec![T::zero(); dim];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for w in chars.windows(3) {
        let start = w[0].0;
        let end = w[2].0 + w[2].1.len_utf8();
        let h = fnv1a64(&text.as_bytes()[start..end]);
        let slot = (h % dim as u64) as usize;
        if h >> 63 == 0 {
            acc[slot] = acc[slot] + T::one();
        } else {
            acc[slot] = acc[slot] - T::one();
        }
    }
    DenseVec(acc).normalized()
}

/// Text the hash embedder sees for a `(buggy, message)` pair: the two parts
/// joined by a newline, or whichever is non-empty.
pub fn embed_text(buggy: &str, message: &str) -> String {
    match (buggy.is_empty(), message.is_empty()) {
        (_, true) => buggy.to_string(),
        (true, false) => message.to_string(),
        (false, false) => format!("{buggy}\n{message}"),
    }
}

pub fn hash_embed<T: Scalar>(buggy: &str, message: &str, dim: usize) -> Result<DenseVec<T>> {
    if dim < 8 {
        return Err(VectorizeError::Precondition(format!(
            "dense dimension must be at least 8, got {dim}"
        )));
    }
    Ok(hash_embed_text(&embed_text(buggy, message), dim))
}

/// The framed token sequence `[CLS] b [SEP] m` cut into pieces of at most
/// `n_s` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSequence {
    pub chunks: Vec<Vec<String>>,
}

impl ChunkSequence {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Token lists of `b` and `m`, with the frame markers removed.
    pub fn reassemble(&self) -> (Vec<String>, Vec<String>) {
        let flat: Vec<&String> = self.chunks.iter().flatten().collect();
        let sep = flat.iter().position(|t| *t == SEP).unwrap_or(flat.len());
        let buggy = flat[1.min(sep)..sep]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let message = flat
            .get(sep + 1..)
            .unwrap_or_default()
            .iter()
            .map(|s| s.to_string())
            .collect();
        (buggy, message)
    }

    pub fn texts(&self) -> Vec<String> {
        self.chunks.iter().map(|c| c.join(" ")).collect()
    }
}

pub fn chunk_sequence(buggy: &str, message: &str, n_s: usize) -> Result<ChunkSequence> {
    if n_s < 8 {
        return Err(VectorizeError::Precondition(format!(
            "chunk size must be at least 8 tokens, got {n_s}"
        )));
    }
    let framed: Vec<String> = std::iter::once(CLS)
        .chain(minihdl::significant_texts(buggy))
        .chain(std::iter::once(SEP))
        .chain(minihdl::significant_texts(message))
        .map(str::to_string)
        .collect();
    Ok(ChunkSequence {
        chunks: framed.chunks(n_s).map(<[String]>::to_vec).collect(),
    })
}

/// Embed every chunk remotely, mean-pool, then normalize.
pub fn remote_embed<T: Scalar>(
    chunks: &ChunkSequence,
    transport: &Transport,
    model: &str,
    dim: usize,
) -> Result<DenseVec<T>> {
    let vectors = transport.embed(model, &chunks.texts())?;
    let mut acc = vec![T::zero(); dim];
    for v in &vectors {
        if v.len() != dim {
            return Err(VectorizeError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a = *a + T::of(x);
        }
    }
    let n = T::of_usize(vectors.len().max(1));
    Ok(DenseVec(acc.into_iter().map(|x| x / n).collect()).normalized())
}

/// Source of semantic vectors.
pub trait Embedder<T: Scalar>: Sync {
    /// Identifies the embedder kind and configuration; an index can only be
    /// queried with an embedder of the same fingerprint.
    fn fingerprint(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, buggy: &str, message: &str) -> Result<DenseVec<T>>;
    /// Upper bound on concurrent `embed` calls during index building.
    fn parallelism(&self) -> usize {
        rayon::current_num_threads()
    }
}

fn config_hash(parts: &[&str]) -> u64 {
    fnv1a64(parts.join("\u{1f}").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder {
            dim: DEFAULT_DENSE_DIM,
        }
    }
}

impl<T: Scalar> Embedder<T> for HashEmbedder {
    fn fingerprint(&self) -> String {
        format!(
            "hash;dim={};cfg={:016x}",
            self.dim,
            config_hash(&["char-trigram", "fnv1a64", "signed"])
        )
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, buggy: &str, message: &str) -> Result<DenseVec<T>> {
        hash_embed(buggy, message, self.dim)
    }
}

pub struct RemoteEmbedder<'t> {
    pub transport: &'t Transport,
    pub model: String,
    pub dim: usize,
    pub chunk_tokens: usize,
}

impl<T: Scalar> Embedder<T> for RemoteEmbedder<'_> {
    fn fingerprint(&self) -> String {
        let ns = self.chunk_tokens.to_string();
        format!(
            "remote;dim={};cfg={:016x}",
            self.dim,
            config_hash(&[&self.model, &ns, "mean-pool"])
        )
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, buggy: &str, message: &str) -> Result<DenseVec<T>> {
        let chunks = chunk_sequence(buggy, message, self.chunk_tokens)?;
        remote_embed(&chunks, self.transport, &self.model, self.dim)
    }

    fn parallelism(&self) -> usize {
        self.transport.max_in_flight()
    }
}

/// Aligned vector arrays for a set of instances.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T> {
    pub ids: Vec<String>,
    pub labels: Vec<MutationOp>,
    pub keyword: Vec<SparseVec<T>>,
    pub semantic: Vec<DenseVec<T>>,
    pub fingerprint: String,
    pub sparse_dim: usize,
    pub dense_dim: usize,
}

impl<T: Scalar> VectorIndex<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> HybridVec<T> {
        HybridVec {
            keyword: self.keyword[i].clone(),
            semantic: self.semantic[i].clone(),
        }
    }

    pub fn check_fingerprint(&self, embedder_fingerprint: &str) -> Result<()> {
        if self.fingerprint != embedder_fingerprint {
            return Err(VectorizeError::Fingerprint {
                index: self.fingerprint.clone(),
                embedder: embedder_fingerprint.to_string(),
            });
        }
        Ok(())
    }
}

/// Everything a search needs: vectors, the TF-IDF model for queries, and
/// the instances themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeIndex<T> {
    pub vectors: VectorIndex<T>,
    pub tfidf: TfidfModel,
    pub instances: Vec<CodeInstance>,
}

impl<T: Scalar> CodeIndex<T> {
    /// An index with no instances; searches against it return no code context.
    pub fn empty(fingerprint: String, dense_dim: usize) -> Self {
        CodeIndex {
            vectors: VectorIndex {
                ids: Vec::new(),
                labels: Vec::new(),
                keyword: Vec::new(),
                semantic: Vec::new(),
                fingerprint,
                sparse_dim: 0,
                dense_dim,
            },
            tfidf: TfidfModel {
                terms: Vec::new(),
                df: Vec::new(),
                n_docs: 0,
            },
            instances: Vec::new(),
        }
    }

    /// Vectorize a query with this index's TF-IDF model and `embedder`.
    pub fn query_vectors(
        &self,
        buggy: &str,
        message: &str,
        embedder: &dyn Embedder<T>,
    ) -> Result<HybridVec<T>> {
        self.vectors.check_fingerprint(&embedder.fingerprint())?;
        Ok(HybridVec {
            keyword: keyword_vector(&self.tfidf, buggy, message),
            semantic: embedder.embed(buggy, message)?,
        })
    }
}

pub fn build_index<T: Scalar>(
    instances: &[CodeInstance],
    embedder: &dyn Embedder<T>,
) -> Result<CodeIndex<T>> {
    if instances.is_empty() {
        return Err(VectorizeError::EmptyIndex);
    }
    let corpus: Vec<(&str, &str)> = instances
        .iter()
        .map(|i| (i.buggy.as_str(), i.message.as_str()))
        .collect();
    let tfidf = fit_tfidf(&corpus)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(embedder.parallelism().max(1))
        .build()
        .map_err(|e| VectorizeError::Precondition(e.to_string()))?;
    let semantic: Vec<DenseVec<T>> = pool.install(|| {
        corpus
            .par_iter()
            .map(|(b, m)| embedder.embed(b, m))
            .collect::<Result<_>>()
    })?;
    if let Some(v) = semantic.iter().find(|v| v.dim() != embedder.dim()) {
        return Err(VectorizeError::DimensionMismatch {
            expected: embedder.dim(),
            got: v.dim(),
        });
    }
    let keyword = corpus
        .iter()
        .map(|(b, m)| keyword_vector(&tfidf, b, m))
        .collect();
    Ok(CodeIndex {
        vectors: VectorIndex {
            ids: instances.iter().map(|i| i.id.clone()).collect(),
            labels: instances.iter().map(|i| i.label).collect(),
            keyword,
            semantic,
            fingerprint: embedder.fingerprint(),
            sparse_dim: tfidf.vocab_size(),
            dense_dim: embedder.dim(),
        },
        tfidf,
        instances: instances.to_vec(),
    })
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| VectorizeError::Format(format!("{what} {n} exceeds u32")))
}

/// Serialize the vector payload:
///
/// ```text
/// "HDBG" | version u32 | fingerprint (len u32, utf-8)
/// | count u32 | dense_dim u32 | sparse_dim u32
/// | dense: count * dense_dim f32
/// | sparse: per instance, nnz u32 then nnz * (index u32, weight f32)
/// | crc32 of all preceding bytes
/// ```
///
/// All integers and floats are little-endian. Weights are stored as `f32`.
pub fn encode_index<T: Scalar>(index: &VectorIndex<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut buf, INDEX_VERSION);
    put_u32(
        &mut buf,
        to_u32(index.fingerprint.len(), "fingerprint length")?,
    );
    buf.extend_from_slice(index.fingerprint.as_bytes());
    put_u32(&mut buf, to_u32(index.len(), "instance count")?);
    put_u32(&mut buf, to_u32(index.dense_dim, "dense dimension")?);
    put_u32(&mut buf, to_u32(index.sparse_dim, "sparse dimension")?);
    for v in &index.semantic {
        if v.dim() != index.dense_dim {
            return Err(VectorizeError::DimensionMismatch {
                expected: index.dense_dim,
                got: v.dim(),
            });
        }
        for &x in &v.0 {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    for v in &index.keyword {
        put_u32(&mut buf, to_u32(v.entries.len(), "sparse entry count")?);
        for &(i, w) in &v.entries {
            put_u32(&mut buf, i);
            buf.extend_from_slice(&(w.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| VectorizeError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Parse the vector payload. Ids and labels live in the sidecar and are
/// filled in by [`load_index`]; here they are left empty.
pub fn decode_index(bytes: &[u8]) -> Result<VectorIndex<f32>> {
    if bytes.len() < 8 {
        return Err(VectorizeError::Format("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(VectorizeError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != INDEX_MAGIC {
        return Err(VectorizeError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(VectorizeError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let fp_len = r.u32()? as usize;
    let fingerprint = std::str::from_utf8(r.take(fp_len)?)
        .map_err(|_| VectorizeError::Format("fingerprint is not UTF-8".into()))?
        .to_string();
    let count = r.u32()? as usize;
    let dense_dim = r.u32()? as usize;
    let sparse_dim = r.u32()? as usize;
    let mut semantic = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let v = (0..dense_dim)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        semantic.push(DenseVec(v));
    }
    let mut keyword = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let nnz = r.u32()? as usize;
        let mut entries = Vec::with_capacity(nnz.min(1 << 20));
        for _ in 0..nnz {
            let i = r.u32()?;
            let w = r.f32()?;
            if i as usize >= sparse_dim || entries.last().is_some_and(|&(p, _)| p >= i) {
                return Err(VectorizeError::Format(format!(
                    "sparse index {i} out of order or range"
                )));
            }
            entries.push((i, w));
        }
        keyword.push(SparseVec {
            dim: sparse_dim,
            entries,
        });
    }
    if r.pos != body.len() {
        return Err(VectorizeError::Format("trailing bytes".into()));
    }
    Ok(VectorIndex {
        ids: Vec::new(),
        labels: Vec::new(),
        keyword,
        semantic,
        fingerprint,
        sparse_dim,
        dense_dim,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    fingerprint: String,
    ids: Vec<String>,
    labels: Vec<MutationOp>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| VectorizeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|source| VectorizeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| VectorizeError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<S: Serialize>(value: &S) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("plain data serializes");
    out.push(b'\n');
    out
}

pub fn save_index<T: Scalar>(dir: &Path, index: &CodeIndex<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| VectorizeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join("index.hdbg"), &encode_index(&index.vectors)?)?;
    let sidecar = Sidecar {
        fingerprint: index.vectors.fingerprint.clone(),
        ids: index.vectors.ids.clone(),
        labels: index.vectors.labels.clone(),
    };
    write_file(&dir.join("meta.json"), &to_json(&sidecar))?;
    write_file(&dir.join("tfidf.json"), &to_json(&index.tfidf))?;
    write_jsonl(&dir.join("instances.jsonl"), &index.instances)?;
    Ok(())
}

/// Load an index directory, failing if it was built with a different
/// embedder configuration.
pub fn load_index(dir: &Path, embedder_fingerprint: &str) -> Result<CodeIndex<f32>> {
    let path = dir.join("index.hdbg");
    let bytes = fs::read(&path).map_err(|source| VectorizeError::Io {
        path: path.clone(),
        source,
    })?;
    let mut vectors = decode_index(&bytes)?;
    let sidecar: Sidecar = read_json(&dir.join("meta.json"))?;
    let tfidf: TfidfModel = read_json(&dir.join("tfidf.json"))?;
    let instances: Vec<CodeInstance> = read_jsonl(&dir.join("instances.jsonl"))?;
    if sidecar.fingerprint != vectors.fingerprint {
        return Err(VectorizeError::Format(
            "sidecar fingerprint disagrees with index file".into(),
        ));
    }
    if sidecar.ids.len() != vectors.semantic.len()
        || sidecar.labels.len() != sidecar.ids.len()
        || instances.len() != sidecar.ids.len()
        || instances
            .iter()
            .zip(&sidecar.ids)
            .any(|(i, id)| &i.id != id)
        || tfidf.vocab_size() != vectors.sparse_dim
    {
        return Err(VectorizeError::Format(
            "index files disagree on instance count or order".into(),
        ));
    }
    vectors.check_fingerprint(embedder_fingerprint)?;
    vectors.ids = sidecar.ids;
    vectors.labels = sidecar.labels;
    Ok(CodeIndex {
        vectors,
        tfidf,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minihdl::{generate_dataset, load_seeds};

    fn dataset(n_seeds: usize) -> Vec<CodeInstance> {
        let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/seeds"));
        let seeds = load_seeds(dir).unwrap();
        generate_dataset(&seeds[..n_seeds], 1, &MutationOp::ALL, 1)
            .unwrap()
            .instances
    }

    #[test]
    fn df_by_hand() {
        let m = fit_tfidf(&[("a", ""), ("a", ""), ("b", "")]).unwrap();
        assert_eq!(m.df_of("a"), Some(2));
        assert_eq!(m.df_of("b"), Some(1));
        assert_eq!(m.n_docs, 3);
        assert_eq!(m.terms, vec!["a", "b"]);
    }

    #[test]
    fn empty_document_and_corpus() {
        let m = fit_tfidf(&[("", "")]).unwrap();
        assert_eq!(m.vocab_size(), 0);
        assert_eq!(m.n_docs, 1);
        assert!(matches!(
            fit_tfidf::<&str, &str>(&[]),
            Err(VectorizeError::EmptyCorpus)
        ));
    }

    #[test]
    fn refit_is_identical() {
        let corpus = [("wire a; assign a = b;", "C-error-1"), ("clock c;", "")];
        assert_eq!(fit_tfidf(&corpus).unwrap(), fit_tfidf(&corpus).unwrap());
    }

    #[test]
    fn weights_by_hand() {
        let m = fit_tfidf(&[("a", ""), ("a", ""), ("b", "")]).unwrap();
        let v: SparseVec<f64> = keyword_vector(&m, "a b", "");
        let wa = (4.0f64 / 3.0).ln() + 1.0;
        let wb = (4.0f64 / 2.0).ln() + 1.0;
        let n = (wa * wa + wb * wb).sqrt();
        assert_eq!(v.entries.len(), 2);
        assert!((v.entries[0].1 - wa / n).abs() < 1e-12);
        assert!((v.entries[1].1 - wb / n).abs() < 1e-12);
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oov_document_is_zero() {
        let m = fit_tfidf(&[("a", "")]).unwrap();
        let v: SparseVec<f64> = keyword_vector(&m, "zzz", "qq");
        assert!(v.entries.is_empty());
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn hash_embed_properties() {
        let a: DenseVec<f64> = hash_embed("assign y = a;", "C-error-1", 256).unwrap();
        let b: DenseVec<f64> = hash_embed("assign y = a;", "C-error-1", 256).unwrap();
        assert_eq!(
            a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((cosine_dense(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let short: DenseVec<f64> = hash_embed("ab", "", 256).unwrap();
        assert_eq!(short.norm(), 0.0);
        assert!(hash_embed::<f64>("x", "y", 4).is_err());
    }

    #[test]
    fn hash_embed_known_bucket() {
        // "abc" is a single trigram; its FNV-1a-64 hash fixes slot and sign
        let h = fnv1a64(b"abc");
        assert_eq!(h, 0xe71fa2190541574b);
        let v: DenseVec<f64> = hash_embed_text("abc", 16);
        let slot = (h % 16) as usize;
        assert_eq!(v.0[slot], -1.0); // bit 63 set
        assert_eq!(v.0.iter().filter(|x| **x != 0.0).count(), 1);
    }

    #[test]
    fn chunking() {
        let one = chunk_sequence("assign a = b;", "", 256).unwrap();
        assert_eq!(one.len(), 1);
        // 2 markers + 17 tokens = 19 = 2 * 9 + 1
        let b = "a b c d e f g h i j k l m n o p q";
        let c = chunk_sequence(b, "", 9).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.chunks[2].len(), 1);
        let (tb, tm) = chunk_sequence("wire a;\nassign a = b;", "C-error-1 at line 2", 8)
            .unwrap()
            .reassemble();
        assert_eq!(tb, minihdl::significant_texts("wire a;\nassign a = b;"));
        assert_eq!(tm, minihdl::significant_texts("C-error-1 at line 2"));
        assert!(chunk_sequence("a", "b", 4).is_err());
    }

    #[test]
    fn index_round_trip() {
        let instances = dataset(3);
        let ix = build_index::<f32>(&instances, &HashEmbedder::default()).unwrap();
        assert_eq!(ix.vectors.len(), instances.len());
        assert_eq!(ix.vectors.keyword.len(), instances.len());
        assert_eq!(ix.vectors.semantic.len(), instances.len());
        let dir = tempfile::tempdir().unwrap();
        save_index(dir.path(), &ix).unwrap();
        let fp = <HashEmbedder as Embedder<f32>>::fingerprint(&HashEmbedder::default());
        let back = load_index(dir.path(), &fp).unwrap();
        assert_eq!(back, ix);

        let again = build_index::<f32>(&instances, &HashEmbedder::default()).unwrap();
        assert_eq!(
            encode_index(&again.vectors).unwrap(),
            encode_index(&ix.vectors).unwrap()
        );

        let other = <HashEmbedder as Embedder<f32>>::fingerprint(&HashEmbedder { dim: 128 });
        assert!(matches!(
            load_index(dir.path(), &other),
            Err(VectorizeError::Fingerprint { .. })
        ));
    }

    #[test]
    fn corrupted_index_detected() {
        let ix = build_index::<f32>(&dataset(1), &HashEmbedder { dim: 16 }).unwrap();
        let mut bytes = encode_index(&ix.vectors).unwrap();
        assert_eq!(&bytes[..4], b"HDBG");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let decoded = decode_index(&bytes).unwrap();
        assert_eq!(decoded.semantic, ix.vectors.semantic);
        assert_eq!(decoded.keyword, ix.vectors.keyword);
        bytes[20] ^= 1;
        assert!(matches!(
            decode_index(&bytes),
            Err(VectorizeError::Checksum { .. })
        ));
        assert!(decode_index(&bytes[..3]).is_err());
    }

    #[test]
    fn unit_norms_across_dataset() {
        let ix = build_index::<f64>(&dataset(2), &HashEmbedder::default()).unwrap();
        for (k, s) in ix.vectors.keyword.iter().zip(&ix.vectors.semantic) {
            assert!((k.norm() - 1.0).abs() < 1e-9);
            assert!((s.norm() - 1.0).abs() < 1e-9);
            assert!(k.entries.windows(2).all(|w| w[0].0 < w[1].0));
        }
    }
}
