//! NDCG, batch runs, latency measurement and distillation-set export.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Qrels, Query, RankedList};
use crate::error::{Error, Result};
use crate::exec::fan_out;
use crate::llm::CallCounts;
use crate::pipeline::{DefaultPolicy, Method, PathTaken, Retriever, SearchConfig, SearchTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// `rel / log2(i + 1)`, as trec_eval's ndcg_cut.
    #[default]
    Linear,
    /// `(2^rel - 1) / log2(i + 1)`.
    Exponential,
}

impl Gain {
    fn value(self, rel: u32) -> f64 {
        match self {
            Gain::Linear => f64::from(rel),
            Gain::Exponential => 2f64.powi(rel as i32) - 1.0,
        }
    }
}

/// NDCG@k of one ranking. Zero when the query has no positive judgments.
pub fn ndcg_at_k(ranked: &RankedList, qrels_for_query: Option<&HashMap<String, u32>>, k: usize, gain: Gain) -> f64 {
    let Some(qrels) = qrels_for_query else {
        return 0.0;
    };
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let mut ideal: Vec<u32> = qrels.values().copied().filter(|&r| r > 0).collect();
    if ideal.is_empty() || k == 0 {
        return 0.0;
    }
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain.value(r) / discount(i))
        .sum();
    let dcg: f64 = ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| gain.value(qrels.get(&e.doc_id).copied().unwrap_or(0)) / discount(i))
        .sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ndcg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub k: usize,
    pub gain: Gain,
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
}

/// Queries missing from `qrels` are left out of both `per_query` and the mean.
pub fn evaluate_run(runs: &[RankedList], qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let per_query: BTreeMap<String, f64> = runs
        .iter()
        .filter(|r| qrels.contains_query(&r.query_id))
        .map(|r| (r.query_id.clone(), ndcg_at_k(r, qrels.for_query(&r.query_id), k, gain)))
        .collect();
    if per_query.is_empty() {
        return Err(Error::EmptyRun);
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        metric: Metric::Ndcg,
        k,
        gain,
        mean,
        per_query,
    })
}

/// Runs `method` over `queries`, up to `parallelism` at a time. Results come
/// back in query order.
pub fn run_batch(
    retriever: &Retriever<'_>,
    method: Method,
    queries: &[Query],
    config: &SearchConfig,
    parallelism: usize,
) -> Result<Vec<(RankedList, SearchTrace)>> {
    fan_out(queries.len(), parallelism, |i| retriever.search(method, &queries[i], config))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLatency {
    pub query_id: String,
    pub ms: f64,
    pub judge_calls: u64,
    pub generation_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_query: Vec<QueryLatency>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Summed over measured (post-warmup) queries.
    pub llm_call_counts: CallCounts,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times each query sequentially. The first `warmup` queries run but are
/// not recorded.
pub fn measure_latency<F>(mut search: F, queries: &[Query], warmup: usize) -> Result<LatencyReport>
where
    F: FnMut(&Query) -> Result<SearchTrace>,
{
    let mut per_query = Vec::with_capacity(queries.len().saturating_sub(warmup));
    let mut counts = CallCounts::default();
    for (i, query) in queries.iter().enumerate() {
        let start = Instant::now();
        let trace = search(query)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if i < warmup {
            continue;
        }
        counts.judge += trace.judge_calls;
        counts.generation += trace.generation_calls;
        per_query.push(QueryLatency {
            query_id: query.query_id.clone(),
            ms,
            judge_calls: trace.judge_calls,
            generation_calls: trace.generation_calls,
        });
    }
    let mut sorted: Vec<f64> = per_query.iter().map(|q| q.ms).collect();
    sorted.sort_by(f64::total_cmp);
    let (mean_ms, p50_ms, p95_ms, min_ms, max_ms) = if sorted.is_empty() {
        (0.0, 0.0, 0.0, 0.0, 0.0)
    } else {
        (
            sorted.iter().sum::<f64>() / sorted.len() as f64,
            percentile(&sorted, 50.0),
            percentile(&sorted, 95.0),
            sorted[0],
            sorted[sorted.len() - 1],
        )
    };
    Ok(LatencyReport {
        per_query,
        mean_ms,
        p50_ms,
        p95_ms,
        min_ms,
        max_ms,
        llm_call_counts: counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub query_id: String,
    pub text: String,
    pub target: Vec<f32>,
}

/// Refined vectors for every query where feedback found at least one
/// relevant document, paired with the trace that produced each.
pub fn build_distill_records(
    retriever: &Retriever<'_>,
    config: &SearchConfig,
    queries: &[Query],
) -> Result<Vec<(DistillRecord, SearchTrace)>> {
    // Defaults must never produce targets.
    let mut config = config.clone();
    config.pipeline.default_policy = DefaultPolicy::None;
    let mut out = Vec::new();
    for query in queries {
        let (_, trace) = retriever.search(Method::Rede, query, &config)?;
        if trace.path_taken != Some(PathTaken::Rede) {
            tracing::debug!(query = %query.query_id, "no relevant documents, skipped");
            continue;
        }
        let target = trace
            .refined_vector
            .clone()
            .ok_or_else(|| Error::PreconditionViolation("feedback path left no refined vector".into()))?
            .into_inner();
        out.push((
            DistillRecord {
                query_id: query.query_id.clone(),
                text: query.text.clone(),
                target,
            },
            trace,
        ));
    }
    Ok(out)
}

pub fn write_distill_jsonl(path: impl AsRef<Path>, records: &[DistillRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the JSONL training set and returns the number of records.
pub fn export_distill_dataset(
    retriever: &Retriever<'_>,
    config: &SearchConfig,
    queries: &[Query],
    out_path: impl AsRef<Path>,
) -> Result<usize> {
    let records: Vec<DistillRecord> = build_distill_records(retriever, config, queries)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    write_distill_jsonl(out_path, &records)?;
    Ok(records.len())
}
