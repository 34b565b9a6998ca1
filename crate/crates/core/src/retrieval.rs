//! Top-K selection of reasoning examples under six strategies: seeded
//! random, BM25 over raw query texts, cosine over raw-query embeddings,
//! cosine over concatenated-feature embeddings (the default), per-feature
//! max-sum scoring, and factor-guided two-stage retrieval (Jaccard
//! pre-filter, then feature cosine within the pool).
//!
//! Ties are broken everywhere by recency: the larger memory index wins.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::domain::{ReasoningMemory, RetrievalConfig, RetrievalStrategy, ScoredExample};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("example {index} has no stored embedding")]
    MissingEmbedding { index: usize },
    #[error("strategy {strategy:?} requires {what}")]
    MissingData {
        strategy: RetrievalStrategy,
        what: &'static str,
    },
}

/// Cosine similarity of two equal-dimension non-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Jaccard similarity of two sets; 0 when both are empty.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Result of one retrieval call.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    /// Selected examples in descending score order under the tie-break.
    pub results: Vec<ScoredExample>,
    /// Set when k exceeded the memory size and everything was returned.
    pub requested_exceeds_memory: bool,
    /// Set when the target had no features and the sentinel-embedding
    /// fallback was used.
    pub empty_target_fallback: bool,
    /// Number of cosine evaluations performed.
    pub cosine_evaluations: usize,
}

impl RetrievalOutcome {
    fn new(results: Vec<ScoredExample>) -> Self {
        Self {
            results,
            requested_exceeds_memory: false,
            empty_target_fallback: false,
            cosine_evaluations: 0,
        }
    }
}

/// Sorts by score descending, breaking ties toward the most recent
/// (largest) index, and keeps the top k.
fn rank_top_k(mut scored: Vec<ScoredExample>, k: usize) -> Vec<ScoredExample> {
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(b.index.cmp(&a.index))
    });
    scored.truncate(k);
    scored
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

fn bm25_tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// In-memory BM25 index over raw document texts (k1 = 1.2, b = 0.75,
/// lowercase whitespace tokens, unique query terms, idf with the +1
/// smoothing so scores stay non-negative).
#[derive(Debug, Clone)]
pub struct Bm25Index {
    term_freqs: Vec<BTreeMap<String, usize>>,
    doc_len: Vec<usize>,
    avgdl: f64,
    df: BTreeMap<String, usize>,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(docs: &[S]) -> Self {
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_len = Vec::with_capacity(docs.len());
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in docs {
            let tokens = bm25_tokenize(doc.as_ref());
            doc_len.push(tokens.len());
            let mut freqs: BTreeMap<String, usize> = BTreeMap::new();
            for t in tokens {
                *freqs.entry(t).or_default() += 1;
            }
            for term in freqs.keys() {
                *df.entry(term.clone()).or_default() += 1;
            }
            term_freqs.push(freqs);
        }
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64
        };
        Self {
            term_freqs,
            doc_len,
            avgdl,
            df,
        }
    }

    pub fn len(&self) -> usize {
        self.term_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_freqs.is_empty()
    }

    /// BM25 score of the query against every document.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let n = self.len() as f64;
        let terms: BTreeSet<String> = bm25_tokenize(query).into_iter().collect();
        let mut scores = vec![0.0; self.len()];
        if self.avgdl == 0.0 {
            return scores;
        }
        for term in &terms {
            let Some(&df) = self.df.get(term) else {
                continue;
            };
            let idf = (1.0 + (n - df as f64 + 0.5) / (df as f64 + 0.5)).ln();
            for (i, freqs) in self.term_freqs.iter().enumerate() {
                let tf = *freqs.get(term).unwrap_or(&0) as f64;
                if tf == 0.0 {
                    continue;
                }
                let norm = 1.0 - BM25_B + BM25_B * self.doc_len[i] as f64 / self.avgdl;
                scores[i] += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm);
            }
        }
        scores
    }
}

/// Precomputed per-memory retrieval data. Sample embeddings come from
/// the stored examples; raw-query and per-feature embeddings are
/// supplied by the caller for the strategies that need them.
#[derive(Debug, Clone)]
pub struct MemoryIndex {
    len: usize,
    sample_embeddings: Option<Vec<Vec<f64>>>,
    query_embeddings: Option<Vec<Vec<f64>>>,
    feature_embeddings: Option<Vec<Vec<Vec<f64>>>>,
    factor_sets: Vec<BTreeSet<String>>,
    bm25: Bm25Index,
}

impl MemoryIndex {
    pub fn build(memory: &ReasoningMemory) -> Result<Self, RetrievalError> {
        let queries: Vec<&str> = memory.examples.iter().map(|e| e.query.as_str()).collect();
        let with_embedding = memory
            .examples
            .iter()
            .filter(|e| e.embedding.is_some())
            .count();
        let sample_embeddings = if with_embedding == memory.len() {
            Some(
                memory
                    .examples
                    .iter()
                    .map(|e| e.embedding.clone().expect("checked above"))
                    .collect(),
            )
        } else if with_embedding == 0 {
            None
        } else {
            let missing = memory
                .examples
                .iter()
                .position(|e| e.embedding.is_none())
                .expect("some example lacks an embedding");
            return Err(RetrievalError::MissingEmbedding { index: missing });
        };
        Ok(Self {
            len: memory.len(),
            sample_embeddings,
            query_embeddings: None,
            feature_embeddings: None,
            factor_sets: memory
                .examples
                .iter()
                .map(|e| e.features.factor_ids())
                .collect(),
            bm25: Bm25Index::build(&queries),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn with_query_embeddings(mut self, embeddings: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(embeddings.len(), self.len);
        self.query_embeddings = Some(embeddings);
        self
    }

    pub fn with_feature_embeddings(mut self, embeddings: Vec<Vec<Vec<f64>>>) -> Self {
        debug_assert_eq!(embeddings.len(), self.len);
        self.feature_embeddings = Some(embeddings);
        self
    }

    pub fn has_query_embeddings(&self) -> bool {
        self.query_embeddings.is_some()
    }

    pub fn has_feature_embeddings(&self) -> bool {
        self.feature_embeddings.is_some()
    }

    fn sample_embeddings(&self) -> Result<&Vec<Vec<f64>>, RetrievalError> {
        self.sample_embeddings
            .as_ref()
            .ok_or(RetrievalError::MissingData {
                strategy: RetrievalStrategy::FeatureCosine,
                what: "stored example embeddings",
            })
    }

    /// Uniform sample without replacement, in draw order.
    pub fn retrieve_random(&self, k: usize, seed: u64) -> RetrievalOutcome {
        let take = k.min(self.len);
        let mut rng = StdRng::seed_from_u64(seed);
        let picked = rand::seq::index::sample(&mut rng, self.len, take);
        let results = picked
            .into_iter()
            .map(|index| ScoredExample { index, score: 0.0 })
            .collect();
        RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            ..RetrievalOutcome::new(results)
        }
    }

    /// BM25 over the raw stored query texts.
    pub fn retrieve_bm25(&self, query: &str, k: usize) -> RetrievalOutcome {
        let scored = self
            .bm25
            .scores(query)
            .into_iter()
            .enumerate()
            .map(|(index, score)| ScoredExample { index, score })
            .collect();
        RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            ..RetrievalOutcome::new(rank_top_k(scored, k))
        }
    }

    fn cosine_rank(
        &self,
        embeddings: &[Vec<f64>],
        target: &[f64],
        k: usize,
        within: Option<&[usize]>,
    ) -> Result<(Vec<ScoredExample>, usize), RetrievalError> {
        let indices: Vec<usize> = match within {
            Some(pool) => pool.to_vec(),
            None => (0..embeddings.len()).collect(),
        };
        let mut scored = Vec::with_capacity(indices.len());
        let mut evals = 0;
        for index in indices {
            let score = cosine(target, &embeddings[index])?;
            evals += 1;
            scored.push(ScoredExample { index, score });
        }
        Ok((rank_top_k(scored, k), evals))
    }

    /// Default strategy: cosine between the embedding of the target's
    /// concatenated feature texts and each stored example embedding.
    pub fn retrieve_feature_cosine(
        &self,
        target_embedding: &[f64],
        k: usize,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        let (results, evals) =
            self.cosine_rank(self.sample_embeddings()?, target_embedding, k, None)?;
        Ok(RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            cosine_evaluations: evals,
            ..RetrievalOutcome::new(results)
        })
    }

    /// Cosine over raw-query embeddings.
    pub fn retrieve_query_cosine(
        &self,
        target_query_embedding: &[f64],
        k: usize,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        let embeddings = self
            .query_embeddings
            .as_ref()
            .ok_or(RetrievalError::MissingData {
                strategy: RetrievalStrategy::QueryCosine,
                what: "raw-query embeddings",
            })?;
        let (results, evals) = self.cosine_rank(embeddings, target_query_embedding, k, None)?;
        Ok(RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            cosine_evaluations: evals,
            ..RetrievalOutcome::new(results)
        })
    }

    /// Per-feature scoring: for every target feature take its best
    /// cosine against the candidate's features and sum the maxima.
    /// Falls back to the sentinel sample embedding when the target has
    /// no features.
    pub fn retrieve_feature_level(
        &self,
        target_feature_embeddings: &[Vec<f64>],
        target_sample_embedding: &[f64],
        k: usize,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        if target_feature_embeddings.is_empty() {
            let mut outcome = self.retrieve_feature_cosine(target_sample_embedding, k)?;
            outcome.empty_target_fallback = true;
            return Ok(outcome);
        }
        let per_feature = self
            .feature_embeddings
            .as_ref()
            .ok_or(RetrievalError::MissingData {
                strategy: RetrievalStrategy::FeatureLevel,
                what: "per-feature embeddings",
            })?;
        let mut evals = 0usize;
        let mut scored = Vec::with_capacity(self.len);
        for (index, candidate) in per_feature.iter().enumerate() {
            let mut score = 0.0;
            for target in target_feature_embeddings {
                let mut best: Option<f64> = None;
                for feature in candidate {
                    let c = cosine(target, feature)?;
                    evals += 1;
                    best = Some(best.map_or(c, |b: f64| b.max(c)));
                }
                score += best.unwrap_or(0.0);
            }
            scored.push(ScoredExample { index, score });
        }
        Ok(RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            cosine_evaluations: evals,
            ..RetrievalOutcome::new(rank_top_k(scored, k))
        })
    }

    /// Builds the two-stage candidate pool: all examples tied at the
    /// best Jaccard score, then next-best score groups until the pool
    /// holds at least `pool_target` candidates, truncating within the
    /// last added group by the recency tie-break.
    pub fn two_stage_pool(
        &self,
        target_factors: &BTreeSet<String>,
        pool_target: usize,
    ) -> Vec<usize> {
        let mut by_score: Vec<(f64, usize)> = self
            .factor_sets
            .iter()
            .enumerate()
            .map(|(i, set)| (jaccard(target_factors, set), i))
            .collect();
        by_score.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(b.1.cmp(&a.1))
        });
        let mut pool = Vec::new();
        let mut i = 0;
        while i < by_score.len() {
            let score = by_score[i].0;
            let mut group = Vec::new();
            while i < by_score.len() && by_score[i].0 == score {
                group.push(by_score[i].1);
                i += 1;
            }
            if pool.is_empty() {
                pool.extend(group);
            } else {
                let need = pool_target.saturating_sub(pool.len());
                pool.extend(group.into_iter().take(need));
            }
            if pool.len() >= pool_target {
                break;
            }
        }
        pool
    }

    /// Factor-guided retrieval: Jaccard pre-filter to a pool of about
    /// `pool_multiplier * k` candidates, then feature-cosine within it.
    pub fn retrieve_two_stage(
        &self,
        target_factors: &BTreeSet<String>,
        target_embedding: &[f64],
        k: usize,
        pool_multiplier: usize,
    ) -> Result<RetrievalOutcome, RetrievalError> {
        let pool = self.two_stage_pool(target_factors, pool_multiplier.saturating_mul(k));
        let (results, evals) =
            self.cosine_rank(self.sample_embeddings()?, target_embedding, k, Some(&pool))?;
        Ok(RetrievalOutcome {
            requested_exceeds_memory: k > self.len,
            cosine_evaluations: evals,
            ..RetrievalOutcome::new(results)
        })
    }
}

/// Target-side inputs for retrieval; which fields must be present
/// depends on the strategy.
#[derive(Debug, Clone, Default)]
pub struct TargetQuery {
    pub query_text: String,
    /// Embedding of the concatenated target feature texts (or of the
    /// empty-set sentinel).
    pub sample_embedding: Option<Vec<f64>>,
    /// Embedding of the raw target query.
    pub query_embedding: Option<Vec<f64>>,
    /// One embedding per target feature.
    pub feature_embeddings: Option<Vec<Vec<f64>>>,
    pub factor_ids: BTreeSet<String>,
}

fn require<'a, T>(
    value: &'a Option<T>,
    strategy: RetrievalStrategy,
    what: &'static str,
) -> Result<&'a T, RetrievalError> {
    value
        .as_ref()
        .ok_or(RetrievalError::MissingData { strategy, what })
}

/// Dispatches to the configured strategy.
pub fn retrieve(
    index: &MemoryIndex,
    config: &RetrievalConfig,
    target: &TargetQuery,
    seed: u64,
) -> Result<RetrievalOutcome, RetrievalError> {
    let k = config.k;
    match config.strategy {
        RetrievalStrategy::Random => Ok(index.retrieve_random(k, seed)),
        RetrievalStrategy::Bm25 => Ok(index.retrieve_bm25(&target.query_text, k)),
        RetrievalStrategy::QueryCosine => {
            let emb = require(
                &target.query_embedding,
                config.strategy,
                "target query embedding",
            )?;
            index.retrieve_query_cosine(emb, k)
        }
        RetrievalStrategy::FeatureCosine => {
            let emb = require(
                &target.sample_embedding,
                config.strategy,
                "target feature-concatenation embedding",
            )?;
            index.retrieve_feature_cosine(emb, k)
        }
        RetrievalStrategy::FeatureLevel => {
            let features = require(
                &target.feature_embeddings,
                config.strategy,
                "per-feature target embeddings",
            )?;
            let sample = require(
                &target.sample_embedding,
                config.strategy,
                "target feature-concatenation embedding",
            )?;
            index.retrieve_feature_level(features, sample, k)
        }
        RetrievalStrategy::TwoStage => {
            let emb = require(
                &target.sample_embedding,
                config.strategy,
                "target feature-concatenation embedding",
            )?;
            index.retrieve_two_stage(&target.factor_ids, emb, k, config.two_stage_pool_multiplier)
        }
    }
}
