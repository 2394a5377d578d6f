//! Per-target-sentence candidate recall.
//!
//! Three scorers (BM25, LCS, dense cosine) each produce a top-k list over the
//! sentences of an example; [`vote_candidates`] keeps the sentences recalled
//! by at least `vote_threshold` distinct retrievers.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Example, Language, SentenceRef};
use crate::providers::{EmbeddingProvider, ProviderError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("example `{0}` has no source sentences")]
    EmptyIndex(String),
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("dense retrieval requires an embedding provider")]
    NoEmbedder,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
    Lcs,
}

impl RetrieverKind {
    pub const ALL: [RetrieverKind; 3] = [RetrieverKind::Bm25, RetrieverKind::Dense, RetrieverKind::Lcs];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrieverKind::Bm25 => "bm25",
            RetrieverKind::Dense => "dense",
            RetrieverKind::Lcs => "lcs",
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrieverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bm25" => Ok(RetrieverKind::Bm25),
            "dense" => Ok(RetrieverKind::Dense),
            "lcs" => Ok(RetrieverKind::Lcs),
            other => Err(format!("unknown retriever `{other}` (expected bm25, lcs or dense)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub vote_threshold: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub retrievers: BTreeSet<RetrieverKind>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            vote_threshold: 2,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            retrievers: RetrieverKind::ALL.into_iter().collect(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k == 0 {
            return Err(RetrievalError::Config("k must be at least 1".into()));
        }
        if self.vote_threshold == 0 {
            return Err(RetrievalError::Config("vote threshold must be at least 1".into()));
        }
        if self.retrievers.is_empty() {
            return Err(RetrievalError::Config("no retrievers selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub sref: SentenceRef,
    pub text: String,
    pub tokens: Vec<String>,
    term_freq: HashMap<String, u32>,
}

/// Sentence-level inverted statistics for one example. Each source sentence is
/// one BM25 "document".
#[derive(Debug, Clone)]
pub struct SentenceIndex {
    pub language: Language,
    entries: Vec<IndexEntry>,
    df: HashMap<String, usize>,
    avg_len: f64,
}

impl SentenceIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn entry(&self, sref: SentenceRef) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.sref.cmp(&sref))
            .ok()
            .map(|i| &self.entries[i])
    }
}

pub fn build_index(example: &Example) -> Result<SentenceIndex, RetrievalError> {
    let entries: Vec<IndexEntry> = example
        .source_sentences()
        .map(|(sref, text)| {
            let tokens = tokenize(text, example.language);
            let mut term_freq = HashMap::new();
            for t in &tokens {
                *term_freq.entry(t.clone()).or_insert(0) += 1;
            }
            IndexEntry {
                sref,
                text: text.to_string(),
                tokens,
                term_freq,
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(RetrievalError::EmptyIndex(example.id.clone()));
    }
    let mut df: HashMap<String, usize> = HashMap::new();
    for e in &entries {
        for t in e.term_freq.keys() {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let total: usize = entries.iter().map(|e| e.tokens.len()).sum();
    let mean = total as f64 / entries.len() as f64;
    // All-punctuation corpora have no tokens; any positive length keeps the
    // normalization finite and no term can match anyway.
    let avg_len = if mean > 0.0 { mean } else { 1.0 };
    Ok(SentenceIndex {
        language: example.language,
        entries,
        df,
        avg_len,
    })
}

/// Okapi BM25 with `idf = ln((N - df + 0.5) / (df + 0.5) + 1)`. Query terms are
/// deduplicated; term frequency is taken on the candidate side only.
pub fn score_bm25(
    index: &SentenceIndex,
    query_tokens: &[String],
    candidate: SentenceRef,
    cfg: &RetrievalConfig,
) -> f64 {
    let Some(entry) = index.entry(candidate) else {
        return 0.0;
    };
    bm25_entry(index, &unique_terms(query_tokens), entry, cfg)
}

fn unique_terms(tokens: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

fn bm25_entry(index: &SentenceIndex, terms: &[&str], entry: &IndexEntry, cfg: &RetrievalConfig) -> f64 {
    let n = index.len() as f64;
    let norm = 1.0 - cfg.bm25_b + cfg.bm25_b * entry.tokens.len() as f64 / index.avg_len;
    terms
        .iter()
        .filter_map(|t| entry.term_freq.get(*t).map(|&tf| (t, tf as f64)))
        .map(|(t, tf)| {
            let df = index.df(t) as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            idf * tf * (cfg.bm25_k1 + 1.0) / (tf + cfg.bm25_k1 * norm)
        })
        .sum()
}

/// Length of the longest common subsequence, O(n·m) time, O(min) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

/// LCS length normalized by the query length.
pub fn score_lcs(query_tokens: &[String], candidate_tokens: &[String]) -> f64 {
    lcs_len(query_tokens, candidate_tokens) as f64 / query_tokens.len().max(1) as f64
}

/// Cosine similarity of two unit vectors.
pub fn score_dense(query: &[f64], candidate: &[f64]) -> Result<f64, RetrievalError> {
    if query.len() != candidate.len() {
        return Err(RetrievalError::DimensionMismatch(query.len(), candidate.len()));
    }
    Ok(query.iter().zip(candidate).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub sref: SentenceRef,
    pub score: f64,
}

/// Top-`k` sentences for one target under one retriever, sorted by score
/// descending with ties broken by ascending [`SentenceRef`].
pub fn retrieve_topk(
    index: &SentenceIndex,
    target: &str,
    kind: RetrieverKind,
    cfg: &RetrievalConfig,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<Vec<Scored>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::Config("empty index".into()));
    }
    let query = tokenize(target, index.language);
    let mut scored: Vec<Scored> = match kind {
        RetrieverKind::Bm25 => {
            let terms = unique_terms(&query);
            index
                .entries
                .iter()
                .map(|e| Scored {
                    sref: e.sref,
                    score: bm25_entry(index, &terms, e, cfg),
                })
                .collect()
        }
        RetrieverKind::Lcs => index
            .entries
            .iter()
            .map(|e| Scored {
                sref: e.sref,
                score: score_lcs(&query, &e.tokens),
            })
            .collect(),
        RetrieverKind::Dense => {
            let embedder = embedder.ok_or(RetrievalError::NoEmbedder)?;
            let q = embedder.embed(&[target.to_string()])?.remove(0);
            let texts: Vec<String> = index.entries.iter().map(|e| e.text.clone()).collect();
            let vecs = embedder.embed(&texts)?;
            index
                .entries
                .iter()
                .zip(&vecs)
                .map(|(e, v)| Ok(Scored { sref: e.sref, score: score_dense(&q, v)? }))
                .collect::<Result<_, RetrievalError>>()?
        }
    };
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sref.cmp(&b.sref)));
    scored.truncate(cfg.k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VotedCandidate {
    pub sref: SentenceRef,
    pub votes: usize,
    /// Best 0-based rank across the retrievers that recalled it.
    pub best_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub target_idx: usize,
    pub per_retriever: BTreeMap<RetrieverKind, Vec<Scored>>,
    pub voted: Vec<VotedCandidate>,
}

impl CandidateSet {
    pub fn voted_refs(&self) -> BTreeSet<SentenceRef> {
        self.voted.iter().map(|v| v.sref).collect()
    }
}

/// Keeps sentences appearing in at least `vote_threshold` retrievers' lists.
/// With fewer retrievers than the threshold the plain union is kept. Output
/// is ordered by votes desc, best rank asc, then [`SentenceRef`].
pub fn vote_candidates(
    per_retriever: &BTreeMap<RetrieverKind, Vec<Scored>>,
    cfg: &RetrievalConfig,
) -> Vec<VotedCandidate> {
    let mut tally: BTreeMap<SentenceRef, (usize, usize)> = BTreeMap::new();
    for list in per_retriever.values() {
        let mut seen = HashSet::new();
        for (rank, s) in list.iter().enumerate() {
            if !seen.insert(s.sref) {
                continue;
            }
            let e = tally.entry(s.sref).or_insert((0, usize::MAX));
            e.0 += 1;
            e.1 = e.1.min(rank);
        }
    }
    let threshold = if per_retriever.len() < cfg.vote_threshold {
        1
    } else {
        cfg.vote_threshold
    };
    let mut voted: Vec<VotedCandidate> = tally
        .into_iter()
        .filter(|(_, (votes, _))| *votes >= threshold)
        .map(|(sref, (votes, best_rank))| VotedCandidate {
            sref,
            votes,
            best_rank,
        })
        .collect();
    voted.sort_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then(a.best_rank.cmp(&b.best_rank))
            .then(a.sref.cmp(&b.sref))
    });
    voted
}

/// Runs every configured retriever for one target and votes.
pub fn retrieve_candidates(
    index: &SentenceIndex,
    target_idx: usize,
    target: &str,
    cfg: &RetrievalConfig,
    embedder: Option<&dyn EmbeddingProvider>,
) -> Result<CandidateSet, RetrievalError> {
    let mut per_retriever = BTreeMap::new();
    for &kind in &cfg.retrievers {
        per_retriever.insert(kind, retrieve_topk(index, target, kind, cfg, embedder)?);
    }
    let voted = vote_candidates(&per_retriever, cfg);
    Ok(CandidateSet {
        target_idx,
        per_retriever,
        voted,
    })
}
