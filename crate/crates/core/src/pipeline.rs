//! Query-vector refinement and end-to-end search orchestration.
//!
//! All three update rules are the same operation, the arithmetic mean of the
//! query vector and a set of document vectors:
//!
//! * relevance feedback averages `f(q)` with the stored embeddings of the
//!   documents the judge accepted,
//! * HyDE averages `f(q)` with encodings of generated documents,
//! * average-PRF averages `f(q)` with every initially retrieved document.
//!
//! When the judge accepts nothing, the configured [`DefaultPolicy`] decides
//! what happens.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query, RankedList, ScoredDoc};
use crate::dense::{DenseIndex, Encoder, QueryVector};
use crate::error::{Error, Result};
use crate::hybrid::{hybrid_search, FusionConfig};
use crate::hyde::{generate_hypothetical_docs, HydeConfig};
use crate::judge::{judge_candidates, JudgeBackend, RelevanceJudgment, RelevantSet, SkippedDoc};
use crate::llm::Gateway;
use crate::sparse::SparseIndex;
use crate::templates::Templates;

/// Mean of `query` and `vectors`. Each coordinate is summed in ascending
/// order, so the result does not depend on the order of `vectors`.
fn mean_with_query(query: &QueryVector, vectors: &[&[f32]]) -> Result<QueryVector> {
    if vectors.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    let dim = query.dim();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let count = (vectors.len() + 1) as f64;
    let mut column = Vec::with_capacity(vectors.len() + 1);
    let values = (0..dim)
        .map(|c| {
            column.clear();
            column.push(query.as_slice()[c]);
            column.extend(vectors.iter().map(|v| v[c]));
            column.sort_by(f32::total_cmp);
            let sum: f64 = column.iter().map(|&x| f64::from(x)).sum();
            (sum / count) as f32
        })
        .collect();
    QueryVector::new(values)
}

/// `(f(q) + Σ C_E[d]) / (k* + 1)` over the accepted documents' embeddings.
pub fn rede_update(query: &QueryVector, relevant_embeddings: &[&[f32]]) -> Result<QueryVector> {
    mean_with_query(query, relevant_embeddings)
}

/// `(f(q) + Σ f(d̂)) / (N + 1)` over encoded hypothetical documents.
pub fn hyde_update(query: &QueryVector, hypothetical: &[&[f32]]) -> Result<QueryVector> {
    mean_with_query(query, hypothetical)
}

/// Treats every initially retrieved document as relevant.
pub fn avg_prf_update(query: &QueryVector, top_k: &[&[f32]]) -> Result<QueryVector> {
    mean_with_query(query, top_k)
}

/// The first `max_kstar` entries of an already ordered relevant set.
pub fn select_feedback_docs(relevant: &RelevantSet, max_kstar: usize) -> Vec<String> {
    relevant
        .docs
        .iter()
        .take(max_kstar)
        .map(|d| d.doc_id.clone())
        .collect()
}

/// Reorders candidates by judged probability, keeping the original rank
/// among ties. Scores become `p_relevant`.
pub fn rerank_by_judge(candidates: &RankedList, judgments: &[RelevanceJudgment]) -> Result<RankedList> {
    let by_doc: HashMap<&str, f64> = judgments
        .iter()
        .map(|j| (j.doc_id.as_str(), j.p_relevant))
        .collect();
    let mut scored = candidates
        .entries
        .iter()
        .map(|e| {
            by_doc
                .get(e.doc_id.as_str())
                .map(|&p| ScoredDoc {
                    doc_id: e.doc_id.clone(),
                    score: p,
                })
                .ok_or_else(|| Error::MissingJudgment(e.doc_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(RankedList {
        query_id: candidates.query_id.clone(),
        entries: scored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialRetriever {
    Sparse,
    Dense,
    #[default]
    Hybrid,
}

/// What to do when the judge accepts no candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultPolicy {
    /// Search with the unmodified query vector.
    #[default]
    EncoderOnly,
    /// Fall back to context-augmented hypothetical documents.
    HydePrf,
    /// Return nothing.
    None,
}

impl FromStr for DefaultPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "encoder_only" | "encoder" => Ok(DefaultPolicy::EncoderOnly),
            "hyde_prf" => Ok(DefaultPolicy::HydePrf),
            "none" => Ok(DefaultPolicy::None),
            other => Err(Error::InvalidConfig(format!("unknown default policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub initial_retriever: InitialRetriever,
    pub k_initial: usize,
    /// `None` uses every accepted document (capped at `k_initial`).
    pub max_kstar: Option<usize>,
    pub default_policy: DefaultPolicy,
    pub output_depth: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            initial_retriever: InitialRetriever::Hybrid,
            k_initial: 20,
            max_kstar: None,
            default_policy: DefaultPolicy::EncoderOnly,
            output_depth: 1000,
        }
    }
}

impl PipelineConfig {
    pub fn max_kstar(&self) -> usize {
        self.max_kstar.unwrap_or(self.k_initial)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_initial == 0 || self.output_depth == 0 {
            return Err(Error::InvalidConfig("k_initial and output_depth must be at least 1".into()));
        }
        let m = self.max_kstar();
        if m == 0 || m > self.k_initial {
            return Err(Error::InvalidConfig(format!(
                "max_kstar {m} must lie in 1..={}",
                self.k_initial
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub pipeline: PipelineConfig,
    pub fusion: FusionConfig,
    pub hyde: HydeConfig,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.fusion.validate()?;
        self.hyde.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bm25,
    Dense,
    Hybrid,
    Avgprf,
    Hyde,
    HydePrf,
    /// Relevance feedback with the configured default policy.
    Rede,
    /// Relevance feedback that always falls back to context-augmented HyDE.
    RedeHydeDefault,
    Rerank,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Bm25,
        Method::Dense,
        Method::Hybrid,
        Method::Avgprf,
        Method::Hyde,
        Method::HydePrf,
        Method::Rede,
        Method::RedeHydeDefault,
        Method::Rerank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bm25 => "bm25",
            Method::Dense => "dense",
            Method::Hybrid => "hybrid",
            Method::Avgprf => "avgprf",
            Method::Hyde => "hyde",
            Method::HydePrf => "hyde-prf",
            Method::Rede => "rede",
            Method::RedeHydeDefault => "rede-hyde-default",
            Method::Rerank => "rerank",
        }
    }

    pub fn needs_gateway(self) -> bool {
        matches!(self, Method::Hyde | Method::HydePrf | Method::RedeHydeDefault)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathTaken {
    Rede,
    DefaultEncoder,
    DefaultHydePrf,
    None,
}

/// Per-query record of what a search did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub query_id: String,
    pub method: Method,
    pub candidates: RankedList,
    pub judgments: Vec<RelevanceJudgment>,
    pub skipped: Vec<SkippedDoc>,
    /// Documents whose embeddings fed the update, in averaging order.
    pub feedback_docs: Vec<String>,
    pub kstar: usize,
    /// Only set for the relevance-feedback methods.
    pub path_taken: Option<PathTaken>,
    pub judge_calls: u64,
    pub generation_calls: u64,
    pub embedding_fetches: usize,
    pub context_fetches: usize,
    pub hypothetical_docs: usize,
    pub refined_vector: Option<QueryVector>,
    pub stage_ms: BTreeMap<String, f64>,
    pub total_ms: f64,
}

impl SearchTrace {
    fn new(query_id: &str, method: Method) -> Self {
        Self {
            query_id: query_id.to_owned(),
            method,
            candidates: RankedList::empty(query_id),
            judgments: Vec::new(),
            skipped: Vec::new(),
            feedback_docs: Vec::new(),
            kstar: 0,
            path_taken: None,
            judge_calls: 0,
            generation_calls: 0,
            embedding_fetches: 0,
            context_fetches: 0,
            hypothetical_docs: 0,
            refined_vector: None,
            stage_ms: BTreeMap::new(),
            total_ms: 0.0,
        }
    }

    pub fn llm_calls(&self) -> u64 {
        self.judge_calls + self.generation_calls
    }

}

/// Runs `f`, adding its wall time to `stage_ms[stage]`.
fn timed<T>(stage_ms: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *stage_ms.entry(stage.to_owned()).or_insert(0.0) += start.elapsed().as_secs_f64() * 1e3;
    out
}

/// Immutable resources shared by every query.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub corpus: &'a Corpus,
    pub sparse: &'a SparseIndex,
    pub dense: &'a DenseIndex,
    pub encoder: &'a dyn Encoder,
    pub judge: &'a JudgeBackend,
    pub gateway: Option<&'a Gateway>,
    pub templates: &'a Templates,
}

impl<'a> Retriever<'a> {
    pub fn search(&self, method: Method, query: &Query, config: &SearchConfig) -> Result<(RankedList, SearchTrace)> {
        config.validate()?;
        if method.needs_gateway() && self.gateway.is_none() {
            return Err(Error::InvalidConfig(format!("method {method} needs a completion gateway")));
        }
        let start = Instant::now();
        let mut trace = SearchTrace::new(&query.query_id, method);
        let query_vec = timed(&mut trace.stage_ms, "encode", || self.encoder.encode_one(&query.text))?;
        let depth = config.pipeline.output_depth;

        let ranked = match method {
            Method::Bm25 => timed(&mut trace.stage_ms, "retrieve", || Ok::<_, Error>(self.sparse.search(&query.query_id, &query.text, depth)))?,
            Method::Dense => timed(&mut trace.stage_ms, "retrieve", || self.dense.search(&query.query_id, &query_vec, depth))?,
            Method::Hybrid => timed(&mut trace.stage_ms, "retrieve", || {
                hybrid_search(self.sparse, self.dense, query, &query_vec, depth, &config.fusion)
            })?,
            Method::Avgprf => {
                trace.candidates = self.initial(query, &query_vec, config, &mut trace)?;
                let ids: Vec<String> = trace.candidates.doc_ids().map(str::to_owned).collect();
                let refined = if ids.is_empty() {
                    query_vec
                } else {
                    let refined = self.refine_from_corpus(&query_vec, &ids, &mut trace, avg_prf_update)?;
                    trace.feedback_docs = ids;
                    refined
                };
                self.final_search(query, refined, depth, &mut trace)?
            }
            Method::Hyde => {
                let refined = self.hyde_vector(query, &query_vec, &[], config, &mut trace)?;
                self.final_search(query, refined, depth, &mut trace)?
            }
            Method::HydePrf => {
                trace.candidates = self.initial(query, &query_vec, config, &mut trace)?;
                let candidates = trace.candidates.clone();
                self.hyde_prf_search(query, &query_vec, &candidates, config, &mut trace)?
            }
            Method::Rede | Method::RedeHydeDefault => {
                let policy = if method == Method::RedeHydeDefault {
                    DefaultPolicy::HydePrf
                } else {
                    config.pipeline.default_policy
                };
                self.rede(query, &query_vec, policy, config, &mut trace)?
            }
            Method::Rerank => {
                trace.candidates = self.initial(query, &query_vec, config, &mut trace)?;
                let outcome = timed(&mut trace.stage_ms, "judge", || judge_candidates(self.judge, self.corpus, query, &trace.candidates));
                let outcome = outcome?;
                trace.judge_calls = outcome.llm_calls;
                trace.judgments = outcome.judgments;
                trace.skipped = outcome.skipped;
                rerank_by_judge(&trace.candidates, &trace.judgments)?
            }
        };
        trace.total_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((ranked, trace))
    }

    /// The first-stage candidate list the feedback methods would judge.
    pub fn candidates(&self, query: &Query, config: &SearchConfig) -> Result<RankedList> {
        config.validate()?;
        let query_vec = self.encoder.encode_one(&query.text)?;
        let mut trace = SearchTrace::new(&query.query_id, Method::Rerank);
        self.initial(query, &query_vec, config, &mut trace)
    }

    fn initial(
        &self,
        query: &Query,
        query_vec: &QueryVector,
        config: &SearchConfig,
        trace: &mut SearchTrace,
    ) -> Result<RankedList> {
        let k = config.pipeline.k_initial;
        timed(&mut trace.stage_ms, "initial_retrieval", || match config.pipeline.initial_retriever {
            InitialRetriever::Sparse => Ok(self.sparse.search(&query.query_id, &query.text, k)),
            InitialRetriever::Dense => self.dense.search(&query.query_id, query_vec, k),
            InitialRetriever::Hybrid => hybrid_search(self.sparse, self.dense, query, query_vec, k, &config.fusion),
        })
    }

    fn refine_from_corpus(
        &self,
        query_vec: &QueryVector,
        doc_ids: &[String],
        trace: &mut SearchTrace,
        update: fn(&QueryVector, &[&[f32]]) -> Result<QueryVector>,
    ) -> Result<QueryVector> {
        timed(&mut trace.stage_ms, "update", || {
            let embeddings = doc_ids
                .iter()
                .map(|id| self.dense.fetch(id))
                .collect::<Result<Vec<_>>>()?;
            trace.embedding_fetches += embeddings.len();
            update(query_vec, &embeddings)
        })
    }

    fn hyde_vector(
        &self,
        query: &Query,
        query_vec: &QueryVector,
        context: &[&str],
        config: &SearchConfig,
        trace: &mut SearchTrace,
    ) -> Result<QueryVector> {
        let gateway = self
            .gateway
            .ok_or_else(|| Error::InvalidConfig("hypothetical document generation needs a gateway".into()))?;
        let generation = timed(&mut trace.stage_ms, "generate", || {
            generate_hypothetical_docs(gateway, self.templates, &config.hyde, &query.text, context)
        });
        let generation = generation?;
        trace.generation_calls += generation.llm_calls;
        trace.hypothetical_docs = generation.docs.len();
        timed(&mut trace.stage_ms, "update", || {
            let encoded = self.encoder.encode(&generation.docs)?;
            let refs: Vec<&[f32]> = encoded.iter().map(Vec::as_slice).collect();
            hyde_update(query_vec, &refs)
        })
    }

    fn hyde_prf_search(
        &self,
        query: &Query,
        query_vec: &QueryVector,
        candidates: &RankedList,
        config: &SearchConfig,
        trace: &mut SearchTrace,
    ) -> Result<RankedList> {
        let context = timed(&mut trace.stage_ms, "context_fetch", || {
            candidates
                .entries
                .iter()
                .take(config.hyde.context_docs)
                .map(|e| {
                    self.corpus
                        .get(&e.doc_id)
                        .map(|d| d.contents())
                        .ok_or_else(|| Error::UnknownDocId(e.doc_id.clone()))
                })
                .collect::<Result<Vec<&str>>>()
        })?;
        trace.context_fetches = context.len();
        let refined = self.hyde_vector(query, query_vec, &context, config, trace)?;
        self.final_search(query, refined, config.pipeline.output_depth, trace)
    }

    fn rede(
        &self,
        query: &Query,
        query_vec: &QueryVector,
        policy: DefaultPolicy,
        config: &SearchConfig,
        trace: &mut SearchTrace,
    ) -> Result<RankedList> {
        trace.candidates = self.initial(query, query_vec, config, trace)?;
        let outcome = timed(&mut trace.stage_ms, "judge", || judge_candidates(self.judge, self.corpus, query, &trace.candidates));
        let feedback = match outcome {
            Ok(outcome) => {
                trace.judge_calls = outcome.llm_calls;
                trace.judgments = outcome.judgments;
                trace.skipped = outcome.skipped;
                select_feedback_docs(&outcome.relevant, config.pipeline.max_kstar())
            }
            Err(Error::AllJudgmentsFailed(qid)) => {
                tracing::warn!(query = %qid, "judge failed on every candidate, using default policy");
                // Each candidate cost one call with an LLM judge.
                if matches!(self.judge, JudgeBackend::Llm { .. }) {
                    trace.judge_calls = trace.candidates.len() as u64;
                }
                trace.skipped = trace
                    .candidates
                    .doc_ids()
                    .map(|d| SkippedDoc {
                        doc_id: d.to_owned(),
                        reason: "judge failed on every candidate".into(),
                    })
                    .collect();
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        trace.kstar = feedback.len();
        let depth = config.pipeline.output_depth;

        if !feedback.is_empty() {
            trace.path_taken = Some(PathTaken::Rede);
            let refined = self.refine_from_corpus(query_vec, &feedback, trace, rede_update)?;
            trace.feedback_docs = feedback;
            return self.final_search(query, refined, depth, trace);
        }
        match policy {
            DefaultPolicy::EncoderOnly => {
                trace.path_taken = Some(PathTaken::DefaultEncoder);
                self.final_search(query, query_vec.clone(), depth, trace)
            }
            DefaultPolicy::HydePrf => {
                trace.path_taken = Some(PathTaken::DefaultHydePrf);
                let candidates = trace.candidates.clone();
                self.hyde_prf_search(query, query_vec, &candidates, config, trace)
            }
            DefaultPolicy::None => {
                trace.path_taken = Some(PathTaken::None);
                Ok(RankedList::empty(&query.query_id))
            }
        }
    }

    fn final_search(
        &self,
        query: &Query,
        refined: QueryVector,
        depth: usize,
        trace: &mut SearchTrace,
    ) -> Result<RankedList> {
        let ranked = timed(&mut trace.stage_ms, "final_search", || self.dense.search(&query.query_id, &refined, depth))?;
        trace.refined_vector = Some(refined);
        Ok(ranked)
    }
}
